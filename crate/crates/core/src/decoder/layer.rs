//! Spiral convolution layers and their cost model.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

use super::spiral::SpiralTable;

/// Gathered input width for the quarter-channel layer.
pub fn partial_channels(channels: usize) -> usize {
    channels.div_ceil(4)
}

/// Row `v` of the result is `features[table(v, k)][..gathered]` concatenated
/// over `k`. Rows are split across `workers` threads; the output does not
/// depend on the split.
pub fn parallel_gather(
    features: &DenseTensor,
    table: &SpiralTable,
    gathered: usize,
    workers: usize,
) -> Result<DenseTensor> {
    let &[v, c] = features.shape() else {
        return Err(Error::invalid("mesh features must be (V, C)"));
    };
    if table.vertices() != v {
        return Err(Error::ShapeMismatch {
            expected: vec![table.vertices()],
            actual: vec![v],
        });
    }
    if gathered > c {
        return Err(Error::invalid(format!("cannot gather {gathered} of {c} channels")));
    }
    let len = table.len();
    let width = gathered * len;
    let mut out = vec![0.0f32; v * width];
    let src = features.data();
    let fill = |first: usize, rows: &mut [f32]| {
        for (r, dst) in rows.chunks_mut(width.max(1)).enumerate() {
            for (k, &n) in table.row(first + r).iter().enumerate() {
                let n = n as usize;
                dst[k * gathered..(k + 1) * gathered].copy_from_slice(&src[n * c..n * c + gathered]);
            }
        }
    };
    let workers = workers.clamp(1, v.max(1));
    if workers == 1 || width == 0 {
        fill(0, &mut out);
    } else {
        let per = v.div_ceil(workers);
        std::thread::scope(|s| {
            for (i, chunk) in out.chunks_mut(per * width).enumerate() {
                let fill = &fill;
                s.spawn(move || fill(i * per, chunk));
            }
        });
    }
    DenseTensor::new(vec![v, width], out)
}

/// Residual spiral convolution `ReLU(gather(x) · Wᵀ + b + x)` over the first
/// `gathered` input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiralLayer {
    channels: usize,
    spiral_len: usize,
    gathered: usize,
    // (channels, gathered * spiral_len)
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl SpiralLayer {
    pub fn new(
        channels: usize,
        spiral_len: usize,
        gathered: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if gathered == 0 || gathered > channels || spiral_len == 0 {
            return Err(Error::invalid("gathered width must lie in 1..=channels"));
        }
        if weights.len() != channels * gathered * spiral_len {
            return Err(Error::ShapeMismatch {
                expected: vec![channels, gathered * spiral_len],
                actual: vec![weights.len()],
            });
        }
        if bias.len() != channels {
            return Err(Error::ShapeMismatch {
                expected: vec![channels],
                actual: vec![bias.len()],
            });
        }
        Ok(Self {
            channels,
            spiral_len,
            gathered,
            weights,
            bias,
        })
    }

    /// Quarter-channel layer, `gathered = ⌈C/4⌉`.
    pub fn splite(channels: usize, spiral_len: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        Self::new(channels, spiral_len, partial_channels(channels), weights, bias)
    }

    /// Full-channel layer, `gathered = C`.
    pub fn full(channels: usize, spiral_len: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        Self::new(channels, spiral_len, channels, weights, bias)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gathered(&self) -> usize {
        self.gathered
    }

    pub fn spiral_len(&self) -> usize {
        self.spiral_len
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Same layer with the weight matrix zero-padded to full channel width.
    pub fn to_full(&self) -> SpiralLayer {
        let (c, cp, l) = (self.channels, self.gathered, self.spiral_len);
        let mut w = vec![0.0; c * c * l];
        for o in 0..c {
            for k in 0..l {
                for i in 0..cp {
                    w[o * c * l + k * c + i] = self.weights[o * cp * l + k * cp + i];
                }
            }
        }
        SpiralLayer::full(c, l, w, self.bias.clone()).expect("consistent padded layer")
    }

    pub fn forward(&self, features: &DenseTensor, table: &SpiralTable, workers: usize) -> Result<DenseTensor> {
        let &[v, c] = features.shape() else {
            return Err(Error::invalid("mesh features must be (V, C)"));
        };
        if c != self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                actual: c,
            });
        }
        if table.len() != self.spiral_len {
            return Err(Error::invalid(format!(
                "spiral table length {} does not match layer length {}",
                table.len(),
                self.spiral_len
            )));
        }
        let g = parallel_gather(features, table, self.gathered, workers)?;
        let width = self.gathered * self.spiral_len;
        let x = features.data();
        let mut out = vec![0.0f32; v * c];
        for (vi, (dst, row)) in out.chunks_mut(c).zip(g.data().chunks(width)).enumerate() {
            for (o, d) in dst.iter_mut().enumerate() {
                let w = &self.weights[o * width..(o + 1) * width];
                let mut acc = self.bias[o];
                for (a, b) in row.iter().zip(w) {
                    acc += a * b;
                }
                *d = (acc + x[vi * c + o]).max(0.0);
            }
        }
        DenseTensor::new(vec![v, c], out)
    }
}

pub fn splite_layer(features: &DenseTensor, layer: &SpiralLayer, table: &SpiralTable) -> Result<DenseTensor> {
    if layer.gathered != partial_channels(layer.channels) {
        return Err(Error::invalid("quarter-channel layer expected"));
    }
    layer.forward(features, table, 1)
}

pub fn spiralconv_pp_layer(features: &DenseTensor, layer: &SpiralLayer, table: &SpiralTable) -> Result<DenseTensor> {
    if layer.gathered != layer.channels {
        return Err(Error::invalid("full-channel layer expected"));
    }
    layer.forward(features, table, 1)
}

/// Closed-form cost of one spiral layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub params: u64,
    pub flops: u64,
}

/// `params = C·(C_p·L) + C`, `flops = V·2·C·(C_p·L)`.
pub fn layer_cost(channels: usize, gathered: usize, spiral_len: usize, vertices: usize) -> LayerCost {
    let (c, d) = (channels as u64, (gathered * spiral_len) as u64);
    LayerCost {
        params: c * d + c,
        flops: vertices as u64 * 2 * c * d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Splite,
    SpiralConvPP,
}

impl LayerKind {
    pub fn gathered(self, channels: usize) -> usize {
        match self {
            LayerKind::Splite => partial_channels(channels),
            LayerKind::SpiralConvPP => channels,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Splite => "splite",
            LayerKind::SpiralConvPP => "spiralconv++",
        }
    }
}

/// Total spiral-layer parameters and FLOPs over the mesh levels.
pub fn count_params_flops(kind: LayerKind, channels: usize, spiral_len: usize, level_vertices: &[usize]) -> LayerCost {
    let gathered = kind.gathered(channels);
    level_vertices
        .iter()
        .map(|&v| layer_cost(channels, gathered, spiral_len, v))
        .fold(LayerCost { params: 0, flops: 0 }, |a, b| LayerCost {
            params: a.params + b.params,
            flops: a.flops + b.flops,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sequential_gather(f: &DenseTensor, t: &SpiralTable, cp: usize) -> Vec<f32> {
        let c = f.shape()[1];
        let mut out = Vec::new();
        for v in 0..t.vertices() {
            for &n in t.row(v) {
                for i in 0..cp {
                    out.push(f.data()[n as usize * c + i]);
                }
            }
        }
        out
    }

    fn random_features(rng: &mut ChaCha8Rng, v: usize, c: usize) -> DenseTensor {
        DenseTensor::new(vec![v, c], (0..v * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_table(rng: &mut ChaCha8Rng, v: usize, l: usize) -> SpiralTable {
        let data = (0..v * l)
            .map(|i| if i % l == 0 { (i / l) as u32 } else { rng.random_range(0..v as u32) })
            .collect();
        SpiralTable::new(v, l, data).unwrap()
    }

    #[test]
    fn identity_table_gathers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_features(&mut rng, 5, 3);
        let g = parallel_gather(&f, &SpiralTable::identity(5, 1), 3, 2).unwrap();
        assert_eq!(g, f);
    }

    #[test]
    fn index_constant_features_trace_the_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_table(&mut rng, 6, 4);
        let f = DenseTensor::new(vec![6, 3], (0..18).map(|i| (i / 3) as f32).collect()).unwrap();
        let g = parallel_gather(&f, &t, 2, 3).unwrap();
        for v in 0..6 {
            for k in 0..4 {
                for i in 0..2 {
                    assert_eq!(g.data()[v * 8 + k * 2 + i], t.row(v)[k] as f32);
                }
            }
        }
    }

    #[test]
    fn gather_independent_of_workers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(&mut rng, 37, 10);
        let t = random_table(&mut rng, 37, 9);
        let seq = sequential_gather(&f, &t, 3);
        for w in [1, 2, 8, 64] {
            assert_eq!(parallel_gather(&f, &t, 3, w).unwrap().data(), &seq[..]);
        }
    }

    #[test]
    fn zero_weights_give_residual_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_features(&mut rng, 9, 8);
        let layer = SpiralLayer::splite(8, 3, vec![0.0; 8 * 2 * 3], vec![0.0; 8]).unwrap();
        let out = splite_layer(&f, &layer, &random_table(&mut rng, 9, 3)).unwrap();
        for (o, x) in out.data().iter().zip(f.data()) {
            assert_eq!(*o, x.max(0.0));
        }
    }

    #[test]
    fn hand_computed_single_vertex() {
        // V=1, L=1, C=4, C_p=1: out_o = relu(w_o * x_0 + b_o + x_o)
        let f = DenseTensor::new(vec![1, 4], vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        let layer = SpiralLayer::splite(4, 1, vec![1.0, -2.0, 0.25, 0.0], vec![0.0, 1.0, 0.0, -4.0]).unwrap();
        let out = splite_layer(&f, &layer, &SpiralTable::identity(1, 1)).unwrap();
        assert_eq!(out.data(), &[4.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn full_layer_identity_doubles() {
        let f = DenseTensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let layer = SpiralLayer::full(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap();
        let out = spiralconv_pp_layer(&f, &layer, &SpiralTable::identity(2, 1)).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0, 1.0, 4.0]);
    }

    #[test]
    fn splite_equals_zero_padded_full_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let c = rng.random_range(4..20);
            let l = rng.random_range(1..10);
            let v = rng.random_range(1..30);
            let cp = partial_channels(c);
            let w = (0..c * cp * l).map(|_| rng.random_range(-0.5..0.5)).collect();
            let b = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let layer = SpiralLayer::splite(c, l, w, b).unwrap();
            let f = random_features(&mut rng, v, c);
            let t = random_table(&mut rng, v, l);
            let a = splite_layer(&f, &layer, &t).unwrap();
            let b = spiralconv_pp_layer(&f, &layer.to_full(), &t).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn closed_form_counts() {
        assert_eq!(layer_cost(48, 12, 9, 1).params, 5_232);
        assert_eq!(layer_cost(48, 48, 9, 1).params, 20_784);
        assert_eq!(layer_cost(48, 12, 9, 778).flops, 778 * 2 * 48 * 108);
        for c in 4..200 {
            let s = layer_cost(c, partial_channels(c), 9, 100);
            let f = layer_cost(c, c, 9, 100);
            assert!(s.params < f.params && s.flops < f.flops);
        }
        let big = layer_cost(4096, 1024, 9, 1);
        let full = layer_cost(4096, 4096, 9, 1);
        assert!((full.params as f64 / big.params as f64 - 4.0).abs() < 1e-3);
    }
}
