//! Spiral mesh decoder: coarse vertex features to the full hand mesh.

pub mod layer;
pub mod spiral;
pub mod template;
pub mod topology;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::store::WeightStore;
use crate::tensor::DenseTensor;

pub use layer::{
    count_params_flops, layer_cost, parallel_gather, partial_channels, splite_layer,
    spiralconv_pp_layer, LayerCost, LayerKind, SpiralLayer,
};
pub use spiral::{build_spiral_table, spiral_table_from_faces, SpiralTable};
pub use template::{hand_template, synthetic_template, Template};
pub use topology::{mesh_upsample, MeshLevel, MeshTopology, UpsampleMatrix, HAND_LEVELS};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub channels: usize,
    pub spiral_len: usize,
    /// Width of the lifted vertex features.
    pub input_channels: usize,
    pub kind: LayerKind,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: 48,
            spiral_len: 9,
            input_channels: 256,
            kind: LayerKind::Splite,
        }
    }
}

impl DecoderConfig {
    pub fn gathered(&self) -> usize {
        self.kind.gathered(self.channels)
    }
}

/// Decoder parameter names and shapes for `levels` mesh levels.
pub fn parameter_shapes(config: &DecoderConfig, levels: usize) -> Vec<(String, Vec<usize>)> {
    let c = config.channels;
    let mut out = vec![
        ("decoder.reduce.weight".to_string(), vec![c, config.input_channels]),
        ("decoder.reduce.bias".to_string(), vec![c]),
    ];
    for l in 0..levels {
        out.push((format!("decoder.level{l}.weight"), vec![c, config.gathered() * config.spiral_len]));
        out.push((format!("decoder.level{l}.bias"), vec![c]));
    }
    out.push(("decoder.head.weight".to_string(), vec![3, c]));
    out.push(("decoder.head.bias".to_string(), vec![3]));
    out
}

pub fn init_random(store: &mut WeightStore, config: &DecoderConfig, levels: usize, rng: &mut impl Rng) {
    for (name, shape) in parameter_shapes(config, levels) {
        let n: usize = shape.iter().product();
        let fan_in = *shape.last().unwrap() as f32;
        let bound = if name.ends_with(".bias") {
            0.02
        } else if name.starts_with("decoder.head") {
            0.02 * (3.0 / fan_in).sqrt()
        } else if name.starts_with("decoder.level") {
            0.5 * (3.0 / fan_in).sqrt()
        } else {
            (3.0 / fan_in).sqrt()
        };
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        store.insert_f32(name, shape, data).expect("shape matches data");
    }
}

/// Loaded decoder with spiral tables for each level.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    reduce_weight: Vec<f32>,
    reduce_bias: Vec<f32>,
    layers: Vec<SpiralLayer>,
    tables: Vec<SpiralTable>,
    upsample: Vec<UpsampleMatrix>,
    head_weight: Vec<f32>,
    head_bias: Vec<f32>,
}

impl Decoder {
    pub fn from_store(store: &WeightStore, topology: &MeshTopology, config: &DecoderConfig) -> Result<Self> {
        topology.validate()?;
        let c = config.channels;
        let get = |name: &str, shape: &[usize]| store.f32_shaped(name, shape).map(DenseTensor::into_data);
        let reduce_weight = get("decoder.reduce.weight", &[c, config.input_channels])?;
        let reduce_bias = get("decoder.reduce.bias", &[c])?;
        let mut layers = Vec::new();
        let mut tables = Vec::new();
        for (l, level) in topology.levels.iter().enumerate() {
            let w = get(&format!("decoder.level{l}.weight"), &[c, config.gathered() * config.spiral_len])?;
            let b = get(&format!("decoder.level{l}.bias"), &[c])?;
            layers.push(SpiralLayer::new(c, config.spiral_len, config.gathered(), w, b)?);
            tables.push(spiral_table_from_faces(level.vertices, &level.faces, config.spiral_len)?);
        }
        let upsample = topology
            .levels
            .iter()
            .filter_map(|l| l.upsample.clone())
            .collect();
        Ok(Self {
            config: config.clone(),
            reduce_weight,
            reduce_bias,
            layers,
            tables,
            upsample,
            head_weight: get("decoder.head.weight", &[3, c])?,
            head_bias: get("decoder.head.bias", &[3])?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[SpiralLayer] {
        &self.layers
    }

    pub fn tables(&self) -> &[SpiralTable] {
        &self.tables
    }

    pub fn input_vertices(&self) -> usize {
        self.tables[0].vertices()
    }

    /// `(V_0, C_in)` vertex features to `(V_last, 3)` root-relative vertices.
    pub fn decode(&self, vertex_features: &DenseTensor, workers: usize) -> Result<DenseTensor> {
        let expected = [self.input_vertices(), self.config.input_channels];
        if vertex_features.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                actual: vertex_features.shape().to_vec(),
            });
        }
        let mut x = affine_rows(vertex_features, &self.reduce_weight, &self.reduce_bias)?;
        for (l, (layer, table)) in self.layers.iter().zip(&self.tables).enumerate() {
            x = layer.forward(&x, table, workers)?;
            if let Some(u) = self.upsample.get(l) {
                x = mesh_upsample(&x, u)?;
            }
        }
        affine_rows(&x, &self.head_weight, &self.head_bias)
    }
}

/// `x · Wᵀ + b` for `x` of shape `(N, in)` and `W` of shape `(out, in)`.
pub fn affine_rows(x: &DenseTensor, weight: &[f32], bias: &[f32]) -> Result<DenseTensor> {
    let &[n, cin] = x.shape() else {
        return Err(Error::invalid("expected a (N, C) matrix"));
    };
    let cout = bias.len();
    if weight.len() != cout * cin {
        return Err(Error::ShapeMismatch {
            expected: vec![cout, cin],
            actual: vec![weight.len()],
        });
    }
    let mut out = Vec::with_capacity(n * cout);
    for row in x.data().chunks(cin.max(1)).take(n) {
        for (o, b) in bias.iter().enumerate() {
            let w = &weight[o * cin..(o + 1) * cin];
            out.push(b + row.iter().zip(w).map(|(a, b)| a * b).sum::<f32>());
        }
    }
    DenseTensor::new(vec![n, cout], out)
}

/// Convenience wrapper: `decode_mesh(F_mesh, decoder)`.
pub fn decode_mesh(vertex_features: &DenseTensor, decoder: &Decoder) -> Result<DenseTensor> {
    decoder.decode(vertex_features, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Decoder, MeshTopology) {
        let topo = hand_template().topology;
        let config = DecoderConfig {
            input_channels: 16,
            ..DecoderConfig::default()
        };
        let mut store = WeightStore::new();
        init_random(&mut store, &config, topo.levels.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        (Decoder::from_store(&store, &topo, &config).unwrap(), topo)
    }

    fn features(seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::new(vec![49, 16], (0..49 * 16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn decodes_full_mesh_independent_of_workers() {
        let (dec, _) = setup(1);
        let f = features(2);
        let a = dec.decode(&f, 1).unwrap();
        assert_eq!(a.shape(), &[778, 3]);
        for w in [2, 4, 8] {
            assert_eq!(dec.decode(&f, w).unwrap(), a);
        }
    }

    #[test]
    fn zero_weights_zero_mesh() {
        let topo = hand_template().topology;
        let config = DecoderConfig {
            input_channels: 16,
            ..DecoderConfig::default()
        };
        let mut store = WeightStore::new();
        for (name, shape) in parameter_shapes(&config, 5) {
            let n = shape.iter().product();
            store.insert_f32(name, shape, vec![0.0; n]).unwrap();
        }
        let dec = Decoder::from_store(&store, &topo, &config).unwrap();
        let out = decode_mesh(&DenseTensor::zeros(vec![49, 16]), &dec).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn composition_of_verified_ops() {
        let (dec, topo) = setup(3);
        let f = features(4);
        let mut x = affine_rows(&f, &dec.reduce_weight, &dec.reduce_bias).unwrap();
        for l in 0..5 {
            let t = build_spiral_table(&topo, l, 9).unwrap();
            x = splite_layer(&x, &dec.layers[l], &t).unwrap();
            if let Some(u) = &topo.levels[l].upsample {
                x = mesh_upsample(&x, u).unwrap();
            }
        }
        let expect = affine_rows(&x, &dec.head_weight, &dec.head_bias).unwrap();
        assert_eq!(decode_mesh(&f, &dec).unwrap(), expect);
    }

    #[test]
    fn missing_level_weight_is_named() {
        let topo = hand_template().topology;
        let config = DecoderConfig::default();
        let mut store = WeightStore::new();
        init_random(&mut store, &config, 5, &mut ChaCha8Rng::seed_from_u64(5));
        store.remove("decoder.level3.bias");
        match Decoder::from_store(&store, &topo, &config) {
            Err(Error::MissingParameter(n)) => assert_eq!(n, "decoder.level3.bias"),
            other => panic!("{other:?}"),
        }
    }
}
