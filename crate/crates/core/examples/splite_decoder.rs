//! Quarter-channel spiral decoder on the five-level hand template.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splite::decoder::{
    build_spiral_table, count_params_flops, hand_template, init_random, Decoder, DecoderConfig, LayerKind,
};
use splite::io::WeightStore;
use splite::tensor::DenseTensor;

fn main() -> splite::Result<()> {
    let template = hand_template();
    let topo = &template.topology;
    println!("levels {:?}", topo.vertex_counts());
    let table = build_spiral_table(topo, 0, 9)?;
    println!("spiral of vertex 0: {:?}", table.row(0));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [LayerKind::Splite, LayerKind::SpiralConvPP] {
        let config = DecoderConfig { input_channels: 32, kind, ..DecoderConfig::default() };
        let mut store = WeightStore::new();
        init_random(&mut store, &config, topo.levels.len(), &mut rng);
        let decoder = Decoder::from_store(&store, topo, &config)?;
        let x: Vec<f32> = (0..49 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mesh = decoder.decode(&DenseTensor::new(vec![49, 32], x)?, 2)?;
        let cost = count_params_flops(kind, 48, 9, &topo.vertex_counts());
        println!(
            "{:>13}: mesh {:?}, per-layer params {}, total FLOPs {}",
            kind.name(),
            mesh.shape(),
            decoder.layers()[0].num_params(),
            cost.flops
        );
    }
    Ok(())
}
