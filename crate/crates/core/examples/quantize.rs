//! Int8 weights: file size, integer convolution and its error bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splite::backbone::{dense_conv2d, ConvMode, ConvSpec};
use splite::decoder::hand_template;
use splite::io::quantize_store;
use splite::pipeline::{random_store, ModelConfig};
use splite::quant::{qconv2d, QConvSpec};
use splite::tensor::{dequantize, quantize_asymmetric, DenseTensor};

fn main() -> splite::Result<()> {
    let config = ModelConfig::default();
    let store = random_store(&config, &hand_template().topology, 0, false);
    let f32_bytes = store.to_bytes()?.len();
    let int8_bytes = quantize_store(&store)?.to_bytes()?.len();
    println!(
        "weights: {f32_bytes} B float, {int8_bytes} B int8, ratio {:.4}",
        int8_bytes as f64 / f32_bytes as f64
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ConvSpec::random(&mut rng, 8, 16, 3, 1, ConvMode::Submanifold);
    let q = QConvSpec::from_conv(&spec)?;
    let x = DenseTensor::new(vec![8, 16, 16], (0..8 * 256).map(|_| rng.random_range(0.0..2.0)).collect())?;
    let scale = 2.0 / 255.0;
    let xq = quantize_asymmetric(&x, scale, -128)?;
    let y_int = qconv2d(&xq, &q)?;
    let y_deq = dense_conv2d(&dequantize(&xq), &q.to_f32()?)?;
    let y_float = dense_conv2d(&dequantize(&xq), &spec)?;
    println!(
        "qconv vs dequantized-weight conv {:.2e} (bound {:.2e})",
        y_int.max_abs_diff(&y_deq)?,
        q.error_bound(scale)
    );
    println!("qconv vs float-weight conv {:.2e}", y_int.max_abs_diff(&y_float)?);
    Ok(())
}
