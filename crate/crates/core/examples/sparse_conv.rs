//! Sparse convolution against its dense reference on a 90%-empty input.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splite::backbone::{dense_conv2d, sparse_conv2d, ConvMode, ConvSpec};
use splite::preproc::synth_sparse_input;
use splite::tensor::{densify, sparsify, DenseTensor};

fn main() -> splite::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let edge = synth_sparse_input(64, 64, 0.9, 1)?;
    // lift the single channel to 16 channels
    let x = DenseTensor::new(vec![16, 64, 64], edge.data().repeat(16))?;
    let sparse = sparsify(&x, 0.0)?;
    println!("active sites {} of {}", sparse.num_active(), 64 * 64);

    for mode in [ConvMode::Submanifold, ConvMode::Generalized] {
        let spec = ConvSpec::random(&mut rng, 16, 32, 3, 1, mode);
        let t = Instant::now();
        let s = sparse_conv2d(&sparse, &spec)?;
        let ts = t.elapsed();
        let t = Instant::now();
        let d = dense_conv2d(&x, &spec)?;
        let td = t.elapsed();

        let sd = densify(&s);
        let mut worst = 0.0f32;
        for &(y, xx) in s.coords() {
            for c in 0..32 {
                worst = worst.max((sd.at3(c, y as usize, xx as usize) - d.at3(c, y as usize, xx as usize)).abs());
            }
        }
        println!(
            "{mode:?}: {} output sites, max |sparse - dense| = {worst:.2e}, sparse {ts:?} vs dense {td:?}",
            s.num_active()
        );
    }
    Ok(())
}
