//! Encoder forward in sparse, masked-dense and dense execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splite::backbone::{init_random, Backbone, BackboneConfig, ExecMode};
use splite::io::WeightStore;
use splite::preproc::{synth_sparse_input, FusedInput};

fn main() -> splite::Result<()> {
    let config = BackboneConfig::tiny();
    let mut store = WeightStore::new();
    init_random(&mut store, &config, &mut ChaCha8Rng::seed_from_u64(0), true);
    let net = Backbone::from_store(&store, &config)?;
    println!("{} parameters, {} dense MACs", store.num_parameters(), net.dense_macs(128, 128));

    let input = FusedInput::from_edge_map(&synth_sparse_input(128, 128, 0.9, 3)?)?;
    let sparse = net.forward(&input, ExecMode::Sparse)?;
    let twin = net.forward(&input, ExecMode::DenseTwin)?;
    let dense = net.forward(&input, ExecMode::Dense)?;
    println!("feature grid   {:?}", sparse.feature_grid.shape());
    println!("heatmaps       {:?}", sparse.heatmap_logits.shape());
    println!("depth logits   {}", sparse.depth_logits.len());
    println!("sparse vs twin  {:.2e}", sparse.heatmap_logits.max_abs_diff(&twin.heatmap_logits)?);
    println!("sparse vs dense {:.2e}", sparse.heatmap_logits.max_abs_diff(&dense.heatmap_logits)?);
    Ok(())
}
