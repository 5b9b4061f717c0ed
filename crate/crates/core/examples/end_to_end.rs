//! Full pipeline on a synthetic edge input, float and int8 side by side.

use splite::decoder::hand_template;
use splite::io::quantize_store;
use splite::lifting::CameraIntrinsics;
use splite::pipeline::{quantized_pipeline_delta, random_store, Model, ModelConfig};
use splite::preproc::{synth_sparse_input, FusedInput};
use splite::quant::QuantMode;

fn main() -> splite::Result<()> {
    let topo = hand_template().topology;
    let config = ModelConfig::tiny();
    let store = random_store(&config, &topo, 0, true);
    let model = Model::from_store(&store, &topo, &config, QuantMode::WeightsOnly)?.with_workers(2);
    let input = FusedInput::from_edge_map(&synth_sparse_input(128, 128, 0.9, 42)?)?;
    let k = CameraIntrinsics::default();

    let (record, t) = model.infer_fused(&input, &k, "synthetic")?;
    println!("root joint {:?}", record.joints[0]);
    println!("{} joints, {} vertices", record.joints.len(), record.vertices.len());
    println!("encode {:?}, lift {:?}, decode {:?}", t.encode, t.lift, t.decode);

    let q = quantize_store(&store)?;
    let deltas = quantized_pipeline_delta(&[("synthetic".into(), input)], &store, &q, &topo, &config, QuantMode::WeightsOnly, &k)?;
    for d in deltas {
        println!("int8 vs float: mean joint {:.4} mm, PA-MPJPE {:.4} mm", d.mean_joint_delta_mm, d.pa_mpjpe_mm);
    }
    Ok(())
}
