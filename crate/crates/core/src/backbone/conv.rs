//! Convolution and pooling over dense grids and active-site lists.
//!
//! Both paths lower to the same kernel: a per-output-site neighbor table
//! (`-1` for an absent tap) drives a tiled gather-GEMM. Dense execution
//! visits every grid site; sparse execution visits only active output sites
//! and skips inactive taps. Each site accumulates bias, then taps in kernel
//! order, then input channels in order, so results do not depend on tiling
//! or worker count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, SparseFeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Output active set equals the input active set.
    Submanifold,
    /// Output active set is every stride-aligned site whose window touches an
    /// active input.
    Generalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: usize,
    mode: ConvMode,
    weights: Vec<f32>,
    bias: Vec<f32>,
    // [kh * kw][in][out]
    packed: Vec<f32>,
}

impl ConvSpec {
    /// `weights` are laid out `(out, in, kh, kw)`.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        mode: ConvMode,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::invalid("kernel extents and stride must be positive"));
        }
        if mode == ConvMode::Submanifold && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::invalid("submanifold kernels need odd extents"));
        }
        if mode == ConvMode::Submanifold && stride != 1 {
            return Err(Error::invalid("submanifold convolution cannot stride"));
        }
        let expected = out_channels * in_channels * kh * kw;
        if weights.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: vec![out_channels, in_channels, kh, kw],
                actual: vec![weights.len()],
            });
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![out_channels],
                actual: vec![bias.len()],
            });
        }
        let taps = kh * kw;
        let mut packed = vec![0.0; expected];
        for o in 0..out_channels {
            for i in 0..in_channels {
                for t in 0..taps {
                    packed[(t * in_channels + i) * out_channels + o] =
                        weights[(o * in_channels + i) * taps + t];
                }
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            mode,
            weights,
            bias,
            packed,
        })
    }

    /// He-uniform weights and small biases.
    pub fn random(
        rng: &mut impl Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        mode: ConvMode,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let weights = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_channels).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self::new(in_channels, out_channels, (kernel, kernel), stride, mode, weights, bias)
            .expect("consistent random spec")
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn padding(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    pub fn with_mode(&self, mode: ConvMode) -> Result<Self> {
        Self::new(
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.stride,
            mode,
            self.weights.clone(),
            self.bias.clone(),
        )
    }

    pub fn with_bias(&self, bias: Vec<f32>) -> Result<Self> {
        Self::new(
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.stride,
            self.mode,
            self.weights.clone(),
            bias,
        )
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        pooled_extent(h, w, self.kernel, self.stride)
    }

    /// Multiply-accumulates of one output site with every tap present.
    pub fn macs_per_site(&self) -> usize {
        self.taps() * self.in_channels * self.out_channels
    }
}

pub(crate) fn pooled_extent(h: usize, w: usize, kernel: (usize, usize), stride: usize) -> (usize, usize) {
    let (ph, pw) = (kernel.0 / 2, kernel.1 / 2);
    (
        (h + 2 * ph).saturating_sub(kernel.0) / stride + 1,
        (w + 2 * pw).saturating_sub(kernel.1) / stride + 1,
    )
}

/// Site-major (`H × W × C`) dense feature grid used inside the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_chw(t: &DenseTensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let mut data = vec![0.0; c * h * w];
        let plane = h * w;
        for ch in 0..c {
            for s in 0..plane {
                data[s * c + ch] = t.data()[ch * plane + s];
            }
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub fn to_chw(&self) -> DenseTensor {
        let (c, plane) = (self.channels, self.height * self.width);
        let mut data = vec![0.0; c * plane];
        for s in 0..plane {
            for ch in 0..c {
                data[ch * plane + s] = self.data[s * c + ch];
            }
        }
        DenseTensor::new(vec![c, self.height, self.width], data).expect("consistent extents")
    }

    pub fn from_sparse(s: &SparseFeatureMap) -> Self {
        let c = s.channels();
        let mut g = Self::zeros(s.height(), s.width(), c);
        for (i, &(r, col)) in s.coords().iter().enumerate() {
            let base = (r as usize * s.width() + col as usize) * c;
            g.data[base..base + c].copy_from_slice(s.site_features(i));
        }
        g
    }

    /// Zeroes every site whose mask entry is false.
    pub fn apply_mask(&mut self, mask: &[bool]) {
        let c = self.channels;
        for (site, &keep) in mask.iter().enumerate() {
            if !keep {
                self.data[site * c..(site + 1) * c].fill(0.0);
            }
        }
    }
}

const SITE_TILE: usize = 8;
const CHANNEL_BLOCK: usize = 128;

/// Gather-GEMM over a neighbor table of `taps` entries per output site.
/// `input` and `out` are site-major.
pub(crate) fn gather_gemm(
    input: &[f32],
    in_channels: usize,
    neighbors: &[i32],
    taps: usize,
    packed: &[f32],
    bias: &[f32],
    out_channels: usize,
    out: &mut [f32],
) {
    debug_assert_eq!(neighbors.len() * out_channels, out.len() * taps);
    out.par_chunks_mut(SITE_TILE * out_channels)
        .enumerate()
        .for_each(|(tile, acc)| {
            let first = tile * SITE_TILE;
            let sites = acc.len() / out_channels;
            for s in 0..sites {
                acc[s * out_channels..(s + 1) * out_channels].copy_from_slice(bias);
            }
            let mut valid: Vec<(usize, usize)> = Vec::with_capacity(SITE_TILE);
            for ob in (0..out_channels).step_by(CHANNEL_BLOCK) {
                let oe = (ob + CHANNEL_BLOCK).min(out_channels);
                for t in 0..taps {
                    valid.clear();
                    for s in 0..sites {
                        let n = neighbors[(first + s) * taps + t];
                        if n >= 0 {
                            valid.push((s, n as usize * in_channels));
                        }
                    }
                    if valid.is_empty() {
                        continue;
                    }
                    for ci in 0..in_channels {
                        let wrow = &packed[(t * in_channels + ci) * out_channels..][ob..oe];
                        for &(s, base) in &valid {
                            let a = input[base + ci];
                            let row = &mut acc[s * out_channels + ob..s * out_channels + oe];
                            for (o, w) in row.iter_mut().zip(wrow) {
                                *o += a * w;
                            }
                        }
                    }
                }
            }
        });
}

/// Neighbor table for dense execution with zero padding.
pub(crate) fn dense_neighbors(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: usize,
) -> (Vec<i32>, usize, usize) {
    let (ph, pw) = (kernel.0 / 2, kernel.1 / 2);
    let (oh, ow) = pooled_extent(h, w, kernel, stride);
    let taps = kernel.0 * kernel.1;
    let mut nbr = vec![-1i32; oh * ow * taps];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut nbr[(oy * ow + ox) * taps..][..taps];
            for ky in 0..kernel.0 {
                let iy = (oy * stride + ky) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel.1 {
                    let ix = (ox * stride + kx) as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    row[ky * kernel.1 + kx] = (iy as usize * w + ix as usize) as i32;
                }
            }
        }
    }
    (nbr, oh, ow)
}

/// Dense convolution of a site-major grid.
pub fn conv_grid(input: &FeatureGrid, spec: &ConvSpec) -> Result<FeatureGrid> {
    if input.channels != spec.in_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.in_channels,
            actual: input.channels,
        });
    }
    let (nbr, oh, ow) = dense_neighbors(input.height, input.width, spec.kernel, spec.stride);
    let mut out = FeatureGrid::zeros(oh, ow, spec.out_channels);
    gather_gemm(
        &input.data,
        input.channels,
        &nbr,
        spec.taps(),
        &spec.packed,
        &spec.bias,
        spec.out_channels,
        &mut out.data,
    );
    Ok(out)
}

/// Cross-correlation with zero padding `k / 2`; stride 1 preserves the
/// spatial extent, stride 2 halves it.
pub fn dense_conv2d(input: &DenseTensor, spec: &ConvSpec) -> Result<DenseTensor> {
    let grid = FeatureGrid::from_chw(input)?;
    Ok(conv_grid(&grid, spec)?.to_chw())
}

/// Output sites and neighbor table of a sparse layer.
pub(crate) fn sparse_rulebook(
    input: &SparseFeatureMap,
    kernel: (usize, usize),
    stride: usize,
    mode: ConvMode,
) -> (Vec<(u32, u32)>, Vec<i32>, usize, usize) {
    let (h, w) = (input.height(), input.width());
    let (ph, pw) = (kernel.0 / 2, kernel.1 / 2);
    let taps = kernel.0 * kernel.1;
    let grid = input.index_grid();
    let (oh, ow, coords) = match mode {
        ConvMode::Submanifold => (h, w, input.coords().to_vec()),
        ConvMode::Generalized => {
            let (oh, ow) = pooled_extent(h, w, kernel, stride);
            let mut hit = vec![false; oh * ow];
            for &(r, c) in input.coords() {
                for ky in 0..kernel.0 {
                    let num = r as isize + ph as isize - ky as isize;
                    if num < 0 || num % stride as isize != 0 || num as usize / stride >= oh {
                        continue;
                    }
                    let oy = num as usize / stride;
                    for kx in 0..kernel.1 {
                        let num = c as isize + pw as isize - kx as isize;
                        if num < 0 || num % stride as isize != 0 || num as usize / stride >= ow {
                            continue;
                        }
                        hit[oy * ow + num as usize / stride] = true;
                    }
                }
            }
            let coords = hit
                .iter()
                .enumerate()
                .filter(|(_, &on)| on)
                .map(|(i, _)| ((i / ow) as u32, (i % ow) as u32))
                .collect();
            (oh, ow, coords)
        }
    };
    let step = if mode == ConvMode::Submanifold { 1 } else { stride };
    let mut nbr = vec![-1i32; coords.len() * taps];
    for (o, &(oy, ox)) in coords.iter().enumerate() {
        let row = &mut nbr[o * taps..(o + 1) * taps];
        for ky in 0..kernel.0 {
            let iy = (oy as usize * step + ky) as isize - ph as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..kernel.1 {
                let ix = (ox as usize * step + kx) as isize - pw as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                row[ky * kernel.1 + kx] = grid[iy as usize * w + ix as usize];
            }
        }
    }
    (coords, nbr, oh, ow)
}

/// Convolution evaluated only at active output sites.
pub fn sparse_conv2d(input: &SparseFeatureMap, spec: &ConvSpec) -> Result<SparseFeatureMap> {
    if input.channels() != spec.in_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.in_channels,
            actual: input.channels(),
        });
    }
    let (coords, nbr, oh, ow) = sparse_rulebook(input, spec.kernel, spec.stride, spec.mode);
    let mut features = vec![0.0; coords.len() * spec.out_channels];
    gather_gemm(
        input.features(),
        input.channels(),
        &nbr,
        spec.taps(),
        &spec.packed,
        &spec.bias,
        spec.out_channels,
        &mut features,
    );
    let stride = match spec.mode {
        ConvMode::Submanifold => input.stride(),
        ConvMode::Generalized => input.stride() * spec.stride,
    };
    Ok(SparseFeatureMap::from_parts_unchecked(
        oh,
        ow,
        stride,
        spec.out_channels,
        coords,
        features,
    ))
}

/// Max pooling over active sites only; absent sites count as −∞ and the
/// output active set follows the generalized rule.
pub fn sparse_max_pool(input: &SparseFeatureMap, kernel: usize, stride: usize) -> SparseFeatureMap {
    let c = input.channels();
    let (coords, nbr, oh, ow) = sparse_rulebook(input, (kernel, kernel), stride, ConvMode::Generalized);
    let taps = kernel * kernel;
    let mut features = vec![f32::NEG_INFINITY; coords.len() * c];
    features
        .par_chunks_mut(c.max(1))
        .zip(nbr.par_chunks(taps))
        .for_each(|(out, row)| {
            for &n in row.iter().filter(|&&n| n >= 0) {
                for (o, v) in out.iter_mut().zip(input.site_features(n as usize)) {
                    *o = o.max(*v);
                }
            }
        });
    SparseFeatureMap::from_parts_unchecked(oh, ow, input.stride() * stride, c, coords, features)
}

/// Dense max pooling; out-of-bounds taps are ignored. With a mask, inactive
/// inputs are ignored too and the returned mask marks outputs whose window
/// touched an active input (those without one are zero).
pub fn max_pool_grid(
    input: &FeatureGrid,
    kernel: usize,
    stride: usize,
    mask: Option<&[bool]>,
) -> (FeatureGrid, Vec<bool>) {
    let c = input.channels;
    let (nbr, oh, ow) = dense_neighbors(input.height, input.width, (kernel, kernel), stride);
    let taps = kernel * kernel;
    let mut out = FeatureGrid::zeros(oh, ow, c);
    let mut out_mask = vec![false; oh * ow];
    for (o, row) in nbr.chunks(taps).enumerate() {
        let dst = &mut out.data[o * c..(o + 1) * c];
        dst.fill(f32::NEG_INFINITY);
        let mut any = false;
        for &n in row.iter().filter(|&&n| n >= 0) {
            let n = n as usize;
            if mask.is_some_and(|m| !m[n]) {
                continue;
            }
            any = true;
            for (d, v) in dst.iter_mut().zip(&input.data[n * c..(n + 1) * c]) {
                *d = d.max(*v);
            }
        }
        if !any {
            dst.fill(0.0);
        }
        out_mask[o] = any;
    }
    (out, out_mask)
}

/// Output active mask of a generalized layer applied to `mask`.
pub fn dilate_mask(
    mask: &[bool],
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: usize,
) -> (Vec<bool>, usize, usize) {
    let taps = kernel.0 * kernel.1;
    let (nbr, oh, ow) = dense_neighbors(h, w, kernel, stride);
    let out = nbr
        .chunks(taps)
        .map(|row| row.iter().any(|&n| n >= 0 && mask[n as usize]))
        .collect();
    (out, oh, ow)
}

pub fn relu_in_place(v: &mut [f32]) {
    for x in v {
        *x = x.max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{densify, sparsify};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // textbook six-loop cross-correlation, f64 accumulation
    fn reference_conv(input: &DenseTensor, spec: &ConvSpec) -> DenseTensor {
        let (c, h, w) = input.dims3().unwrap();
        let (kh, kw) = spec.kernel();
        let (ph, pw) = spec.padding();
        let s = spec.stride();
        let (oh, ow) = spec.output_extent(h, w);
        let oc = spec.out_channels();
        let mut out = vec![0.0f32; oc * oh * ow];
        for o in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = spec.bias()[o] as f64;
                    for i in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * s + ky) as isize - ph as isize;
                                let ix = (x * s + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = spec.weights()[((o * c + i) * kh + ky) * kw + kx] as f64;
                                acc += wv * input.at3(i, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc as f32;
                }
            }
        }
        DenseTensor::new(vec![oc, oh, ow], out).unwrap()
    }

    fn random_sparse(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, sparsity: f64) -> SparseFeatureMap {
        let mut t = DenseTensor::zeros(vec![c, h, w]);
        for site in 0..h * w {
            if rng.random_bool(1.0 - sparsity) {
                for ch in 0..c {
                    t.data_mut()[ch * h * w + site] = rng.random_range(-1.0..1.0);
                }
            }
        }
        sparsify(&t, 0.0).unwrap()
    }

    fn identity_1x1(c: usize) -> ConvSpec {
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        ConvSpec::new(c, c, (1, 1), 1, ConvMode::Submanifold, w, vec![0.0; c]).unwrap()
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = SparseFeatureMap::empty(8, 8, 1, 4);
        for (mode, stride) in [(ConvMode::Submanifold, 1), (ConvMode::Generalized, 2)] {
            let spec = ConvSpec::random(&mut rng, 4, 6, 3, stride, mode);
            assert_eq!(sparse_conv2d(&s, &spec).unwrap().num_active(), 0);
        }
    }

    #[test]
    fn identity_kernel_passes_features_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_sparse(&mut rng, 5, 9, 7, 0.7);
        let out = sparse_conv2d(&s, &identity_1x1(5)).unwrap();
        assert_eq!(out, s);
        let d = densify(&s);
        assert_eq!(dense_conv2d(&d, &identity_1x1(5)).unwrap(), d);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_sparse(&mut rng, 3, 6, 6, 0.5);
        let spec = ConvSpec::random(&mut rng, 4, 4, 3, 1, ConvMode::Submanifold);
        assert!(matches!(sparse_conv2d(&s, &spec), Err(Error::ChannelMismatch { .. })));
        assert!(dense_conv2d(&densify(&s), &spec).is_err());
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        let (h, w) = (9, 9);
        let weights: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let spec = ConvSpec::new(1, 1, (3, 3), 1, ConvMode::Submanifold, weights.clone(), vec![0.0]).unwrap();
        let mut t = DenseTensor::zeros(vec![1, h, w]);
        t.data_mut()[4 * w + 4] = 1.0;
        let out = dense_conv2d(&t, &spec).unwrap();
        for ky in 0..3 {
            for kx in 0..3 {
                // out[p + pad - k] = w[k]
                assert_eq!(out.at3(0, 4 + 1 - ky, 4 + 1 - kx), weights[ky * 3 + kx]);
            }
        }
        assert_eq!(out.data().iter().filter(|v| **v != 0.0).count(), 9);
    }

    #[test]
    fn dense_matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (k, stride) in [(3, 1), (3, 2), (7, 2), (1, 1), (1, 2)] {
            let spec = ConvSpec::random(&mut rng, 5, 7, k, stride, ConvMode::Generalized);
            let data = (0..5 * 13 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = DenseTensor::new(vec![5, 13, 10], data).unwrap();
            let fast = dense_conv2d(&t, &spec).unwrap();
            let slow = reference_conv(&t, &spec);
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-6, "k={k} s={stride}");
        }
    }

    #[test]
    fn sparse_matches_dense_on_active_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (mode, k, stride) in [
            (ConvMode::Submanifold, 3, 1),
            (ConvMode::Generalized, 3, 2),
            (ConvMode::Generalized, 7, 2),
            (ConvMode::Generalized, 3, 1),
        ] {
            let s = random_sparse(&mut rng, 6, 16, 16, 0.85);
            let spec = ConvSpec::random(&mut rng, 6, 8, k, stride, mode);
            let out = sparse_conv2d(&s, &spec).unwrap();
            let dense = reference_conv(&densify(&s), &spec);
            let (_, oh, ow) = dense.dims3().unwrap();
            assert_eq!((out.height(), out.width()), (oh, ow));
            let got = densify(&out);
            let grid = out.index_grid();
            for ch in 0..8 {
                for site in 0..oh * ow {
                    let expect = if grid[site] >= 0 { dense.data()[ch * oh * ow + site] } else { 0.0 };
                    assert!((got.data()[ch * oh * ow + site] - expect).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn generalized_active_set_is_window_dilation() {
        let s = SparseFeatureMap::new(8, 8, 1, 1, vec![(3, 3)], vec![1.0]).unwrap();
        let spec = ConvSpec::new(1, 1, (3, 3), 2, ConvMode::Generalized, vec![1.0; 9], vec![0.0]).unwrap();
        let out = sparse_conv2d(&s, &spec).unwrap();
        // input row 3 lies in windows of output rows 1 (2..4) and 2 (3..5)
        assert_eq!(out.coords(), &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert_eq!(out.stride(), 2);
        let mask: Vec<bool> = (0..64).map(|i| i == 3 * 8 + 3).collect();
        let (dm, oh, ow) = dilate_mask(&mask, 8, 8, (3, 3), 2);
        assert_eq!((oh, ow), (4, 4));
        let expect: Vec<usize> = out.coords().iter().map(|&(r, c)| r as usize * 4 + c as usize).collect();
        let got: Vec<usize> = dm.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn submanifold_keeps_active_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_sparse(&mut rng, 4, 12, 12, 0.8);
        let spec = ConvSpec::random(&mut rng, 4, 4, 3, 1, ConvMode::Submanifold);
        assert_eq!(sparse_conv2d(&s, &spec).unwrap().coords(), s.coords());
    }

    #[test]
    fn linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_sparse(&mut rng, 3, 10, 10, 0.7);
        let spec = ConvSpec::random(&mut rng, 3, 5, 3, 2, ConvMode::Generalized)
            .with_bias(vec![0.0; 5])
            .unwrap();
        let a = sparse_conv2d(&s, &spec).unwrap();
        let scaled = s.with_features(3, s.features().iter().map(|v| v * 2.5).collect());
        let b = sparse_conv2d(&scaled, &spec).unwrap();
        for (x, y) in a.features().iter().zip(b.features()) {
            assert!((2.5 * x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn sparse_pool_ignores_absent_sites() {
        let s = SparseFeatureMap::new(4, 4, 1, 1, vec![(0, 0), (1, 1)], vec![-3.0, -1.0]).unwrap();
        let out = sparse_max_pool(&s, 3, 2);
        assert_eq!(out.coords(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        // window of (0,0) covers both sites; negative maxima survive
        assert_eq!(out.site_features(0), &[-1.0]);
        let grid = FeatureGrid::from_sparse(&s);
        let mask: Vec<bool> = (0..16).map(|i| i == 0 || i == 5).collect();
        let (pooled, m) = max_pool_grid(&grid, 3, 2, Some(&mask));
        assert_eq!(m, vec![true, true, true, true]);
        let expect = densify(&out);
        assert_eq!(pooled.to_chw(), expect);
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_sparse(&mut rng, 16, 20, 20, 0.6);
        let spec = ConvSpec::random(&mut rng, 16, 32, 3, 1, ConvMode::Submanifold);
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| sparse_conv2d(&s, &spec).unwrap())
        };
        let one = run(1);
        assert_eq!(one, run(3));
    }
}
