//! End-to-end inference: image → edges → encoder → lifting → mesh.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, Arch, Backbone, BackboneConfig, ExecMode};
use crate::decoder::{self, Decoder, DecoderConfig, LayerKind, MeshTopology};
use crate::error::{Error, Result};
use crate::io::{activation_ranges, PredictionRecord, StoredTensor, WeightStore};
use crate::lifting::{
    backproject, depth_from_logits, pose_pooling, pose_to_vertex, soft_argmax, CameraIntrinsics,
    LiftingMatrix,
};
use crate::metrics::{pa_mpjpe, Point3};
use crate::preproc::{fuse_image, FusedInput, Image, INPUT_SIZE};
use crate::quant::QuantMode;

pub const LIFTING_MATRIX: &str = "lifting.matrix";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    /// Soft-argmax temperature.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(BackboneConfig::default())
    }
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        let decoder = DecoderConfig {
            input_channels: backbone.feature_channels,
            ..DecoderConfig::default()
        };
        Self {
            backbone,
            decoder,
            temperature: 1.0,
        }
    }

    pub fn tiny() -> Self {
        Self::new(BackboneConfig::tiny())
    }

    /// Reads layer widths back from parameter shapes.
    pub fn from_store(store: &WeightStore, spiral_len: usize) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            store
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::MissingParameter(name.to_string()))
        };
        let arch = if store.contains("backbone.stage1.block0.conv3.weight") {
            Arch::ResNet50
        } else {
            Arch::ResNet18
        };
        let mut widths = [0; 4];
        for (s, w) in widths.iter_mut().enumerate() {
            let conv = match arch {
                Arch::ResNet18 => "conv2",
                Arch::ResNet50 => "conv1",
            };
            *w = shape(&format!("backbone.stage{}.block0.{conv}.weight", s + 1))?[0];
        }
        let feature = shape("backbone.head.feature.weight")?;
        let heat = shape("backbone.head.heatmap.weight")?;
        let backbone = BackboneConfig {
            arch,
            widths,
            feature_channels: feature[0],
            keypoints: heat[0],
            sparse_stages: 2,
        };
        let level = shape("decoder.level0.weight")?;
        let channels = level[0];
        let kind = if level[1] == channels * spiral_len {
            LayerKind::SpiralConvPP
        } else {
            LayerKind::Splite
        };
        let mut config = Self::new(backbone);
        config.decoder.channels = channels;
        config.decoder.spiral_len = spiral_len;
        config.decoder.kind = kind;
        Ok(config)
    }
}

/// Random weights for every model parameter, deterministic in `seed`.
pub fn random_store(config: &ModelConfig, topology: &MeshTopology, seed: u64, with_bn: bool) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    backbone::init_random(&mut store, &config.backbone, &mut rng, with_bn);
    let (rows, cols) = (topology.levels[0].vertices, config.backbone.keypoints);
    let mut lift = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f32> = (0..cols).map(|_| rng.random_range(0.0f32..1.0).powi(4)).collect();
        let total: f32 = row.iter().sum();
        lift.extend(row.iter().map(|v| v / total));
    }
    store
        .insert_f32(LIFTING_MATRIX, vec![rows, cols], lift)
        .expect("lifting matrix shape");
    decoder::init_random(&mut store, &config.decoder, topology.levels.len(), &mut rng);
    store
}

/// Wall-clock time per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub preproc: Duration,
    pub encode: Duration,
    pub lift: Duration,
    pub decode: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.preproc + self.encode + self.lift + self.decode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    backbone: Backbone,
    lifting: LiftingMatrix,
    decoder: Decoder,
    workers: usize,
}

impl Model {
    pub fn from_store(store: &WeightStore, topology: &MeshTopology, config: &ModelConfig, mode: QuantMode) -> Result<Self> {
        let mut backbone = Backbone::from_store(store, &config.backbone)?;
        if mode == QuantMode::WeightsAndActivations {
            let params = activation_ranges(store)?
                .ok_or_else(|| Error::MissingParameter("quant.act.input.range".into()))?;
            backbone = backbone.with_activation_quant(params)?;
        }
        let lift = store.f32_shaped(
            LIFTING_MATRIX,
            &[topology.levels[0].vertices, config.backbone.keypoints],
        )?;
        Ok(Self {
            config: config.clone(),
            backbone,
            lifting: LiftingMatrix::from_tensor(&lift)?,
            decoder: Decoder::from_store(store, topology, &config.decoder)?,
            workers: 1,
        })
    }

    /// Gather workers used by the decoder.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn infer_image(&self, image: &Image, k: &CameraIntrinsics, image_id: &str) -> Result<(PredictionRecord, StageTimings)> {
        let t0 = Instant::now();
        let img = if image.width() != INPUT_SIZE || image.height() != INPUT_SIZE {
            image.resized(INPUT_SIZE, INPUT_SIZE)
        } else {
            image.clone()
        };
        let (fused, _) = fuse_image(&img)?;
        let preproc = t0.elapsed();
        let (record, mut timings) = self.infer_fused(&fused, k, image_id)?;
        timings.preproc = preproc;
        Ok((record, timings))
    }

    pub fn infer_fused(&self, input: &FusedInput, k: &CameraIntrinsics, image_id: &str) -> Result<(PredictionRecord, StageTimings)> {
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let out = self.backbone.forward(input, ExecMode::Sparse)?;
        timings.encode = t.elapsed();

        let t = Instant::now();
        let landmarks = soft_argmax(&out.heatmap_logits, self.config.temperature)?;
        let pooled = pose_pooling(&out.feature_grid, &landmarks)?;
        let vertex_features = pose_to_vertex(&pooled, &self.lifting)?;
        let pixels = landmarks.to_pixels();
        let depth = depth_from_logits(&out.depth_logits);
        let joints = backproject(&pixels, &depth, k)?;
        timings.lift = t.elapsed();

        let t = Instant::now();
        let relative = self.decoder.decode(&vertex_features, self.workers)?;
        timings.decode = t.elapsed();

        let root = joints[0];
        let vertices = relative
            .data()
            .chunks(3)
            .map(|v| [root[0] + v[0] as f64, root[1] + v[1] as f64, root[2] + v[2] as f64])
            .collect();
        let record = PredictionRecord {
            image_id: image_id.to_string(),
            joints,
            vertices,
            keypoints_2d: pixels,
            confidence: landmarks.confidence,
        };
        Ok((record, timings))
    }
}

/// Float vs int8 outcome on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineDelta {
    pub image_id: String,
    pub mean_joint_delta_mm: f64,
    pub max_joint_delta_mm: f64,
    pub mean_vertex_delta_mm: f64,
    /// PA-MPJPE of the int8 joints against the float joints.
    pub pa_mpjpe_mm: f64,
}

fn distances_mm(a: &[Point3], b: &[Point3]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(p, q)| 1000.0 * ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .collect()
}

/// Checks that two stores hold the same parameters with the same shapes,
/// ignoring calibration entries.
pub fn check_compatible(a: &WeightStore, b: &WeightStore) -> Result<()> {
    let params = |s: &WeightStore| -> Vec<(String, Vec<usize>)> {
        s.iter()
            .filter(|(n, _)| !n.starts_with("quant."))
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    };
    let (pa, pb) = (params(a), params(b));
    if pa.len() != pb.len() {
        return Err(Error::invalid(format!(
            "stores hold {} and {} parameters",
            pa.len(),
            pb.len()
        )));
    }
    for ((na, sa), (nb, sb)) in pa.iter().zip(&pb) {
        if na != nb {
            return Err(Error::invalid(format!("parameter sets differ at `{na}` / `{nb}`")));
        }
        if sa != sb {
            return Err(Error::ParameterShape {
                name: na.clone(),
                expected: sa.clone(),
                actual: sb.clone(),
            });
        }
    }
    Ok(())
}

/// Runs float and int8 pipelines on each input and reports the differences.
pub fn quantized_pipeline_delta(
    inputs: &[(String, FusedInput)],
    f32_store: &WeightStore,
    i8_store: &WeightStore,
    topology: &MeshTopology,
    config: &ModelConfig,
    mode: QuantMode,
    k: &CameraIntrinsics,
) -> Result<Vec<PipelineDelta>> {
    check_compatible(f32_store, i8_store)?;
    if f32_store.iter().any(|(_, t)| matches!(t, StoredTensor::I8(_))) {
        return Err(Error::invalid("reference store must be float"));
    }
    let float = Model::from_store(f32_store, topology, config, QuantMode::WeightsOnly)?;
    let int8 = Model::from_store(i8_store, topology, config, mode)?;
    inputs
        .iter()
        .map(|(id, x)| {
            let (a, _) = float.infer_fused(x, k, id)?;
            let (b, _) = int8.infer_fused(x, k, id)?;
            let joints = distances_mm(&a.joints, &b.joints);
            let verts = distances_mm(&a.vertices, &b.vertices);
            Ok(PipelineDelta {
                image_id: id.clone(),
                mean_joint_delta_mm: joints.iter().sum::<f64>() / joints.len() as f64,
                max_joint_delta_mm: joints.iter().fold(0.0, |m: f64, v| m.max(*v)),
                mean_vertex_delta_mm: verts.iter().sum::<f64>() / verts.len().max(1) as f64,
                pa_mpjpe_mm: pa_mpjpe(&b.joints, &a.joints)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::hand_template;
    use crate::io::quantize_store;
    use crate::preproc::synth_sparse_input;

    fn input(seed: u64) -> FusedInput {
        FusedInput::from_edge_map(&synth_sparse_input(128, 128, 0.9, seed).unwrap()).unwrap()
    }

    #[test]
    fn end_to_end_shapes_and_determinism() {
        let topo = hand_template().topology;
        let config = ModelConfig::tiny();
        let store = random_store(&config, &topo, 1, true);
        let model = Model::from_store(&store, &topo, &config, QuantMode::WeightsOnly).unwrap();
        let k = CameraIntrinsics::default();
        let (r, _) = model.infer_fused(&input(2), &k, "x").unwrap();
        assert_eq!(r.joints.len(), 21);
        assert_eq!(r.vertices.len(), 778);
        assert!(r.joints.iter().all(|j| j[2] > 0.0));
        let again = model.clone().with_workers(4).infer_fused(&input(2), &k, "x").unwrap().0;
        assert_eq!(r.to_line().unwrap(), again.to_line().unwrap());
    }

    #[test]
    fn config_is_recovered_from_store() {
        let topo = hand_template().topology;
        let config = ModelConfig::tiny();
        let store = random_store(&config, &topo, 3, false);
        assert_eq!(ModelConfig::from_store(&store, 9).unwrap(), config);
    }

    #[test]
    fn exact_weights_give_zero_delta() {
        let topo = hand_template().topology;
        let config = ModelConfig::tiny();
        let store = random_store(&config, &topo, 4, false);
        // round-trip through int8 so the float store holds representable weights
        let q = quantize_store(&store).unwrap();
        let mut exact = WeightStore::new();
        for name in q.names() {
            exact.insert(name, StoredTensor::F32(q.f32(name).unwrap()));
        }
        let inputs = vec![("a".to_string(), input(5))];
        let k = CameraIntrinsics::default();
        let d = quantized_pipeline_delta(&inputs, &exact, &q, &topo, &config, QuantMode::WeightsOnly, &k).unwrap();
        assert_eq!(d[0].mean_joint_delta_mm, 0.0);
        assert_eq!(d[0].mean_vertex_delta_mm, 0.0);
    }

    #[test]
    fn random_weights_delta_is_small() {
        let topo = hand_template().topology;
        let config = ModelConfig::tiny();
        let store = random_store(&config, &topo, 6, true);
        let q = quantize_store(&store).unwrap();
        let inputs: Vec<_> = (0..2).map(|i| (format!("{i}"), input(10 + i))).collect();
        let k = CameraIntrinsics::default();
        let d = quantized_pipeline_delta(&inputs, &store, &q, &topo, &config, QuantMode::WeightsOnly, &k).unwrap();
        for x in d {
            assert!(x.mean_joint_delta_mm <= 5.0, "{x:?}");
        }
    }

    #[test]
    fn mismatched_stores_are_rejected() {
        let topo = hand_template().topology;
        let config = ModelConfig::tiny();
        let a = random_store(&config, &topo, 7, false);
        let mut b = quantize_store(&a).unwrap();
        b.remove(LIFTING_MATRIX);
        let k = CameraIntrinsics::default();
        assert!(quantized_pipeline_delta(&[], &a, &b, &topo, &config, QuantMode::WeightsOnly, &k).is_err());
    }
}
