//! Dense, sparse and int8 tensor representations.
//!
//! `DenseTensor` is a row-major `f32` array used at module boundaries and as
//! the reference representation. `SparseFeatureMap` is a sorted coordinate
//! list with one channel vector per active site. `QuantizedTensor` carries an
//! int8 payload with affine parameters, either per tensor or per leading-axis
//! channel.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn scale(&self, alpha: f32) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }
}

/// Fraction of elements with `|value| <= threshold`.
pub fn sparsity(t: &DenseTensor, threshold: f32) -> Result<f64> {
    if t.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(threshold >= 0.0) {
        return Err(Error::invalid("threshold must be nonnegative"));
    }
    let quiet = t.data.iter().filter(|v| v.abs() <= threshold).count();
    Ok(quiet as f64 / t.len() as f64)
}

/// Active-site representation of a `(C, H, W)` feature map.
///
/// Coordinates are `(row, col)` pairs, unique and sorted lexicographically.
/// Features are stored row-major, `channels` values per site.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureMap {
    height: usize,
    width: usize,
    stride: usize,
    channels: usize,
    coords: Vec<(u32, u32)>,
    features: Vec<f32>,
}

impl SparseFeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        stride: usize,
        channels: usize,
        coords: Vec<(u32, u32)>,
        features: Vec<f32>,
    ) -> Result<Self> {
        if features.len() != coords.len() * channels {
            return Err(Error::invalid(format!(
                "{} sites × {} channels needs {} feature values, got {}",
                coords.len(),
                channels,
                coords.len() * channels,
                features.len()
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        for (i, &(r, c)) in coords.iter().enumerate() {
            if r as usize >= height || c as usize >= width {
                return Err(Error::invalid(format!(
                    "site ({r}, {c}) outside {height}×{width}"
                )));
            }
            if i > 0 && coords[i - 1] >= (r, c) {
                return Err(Error::invalid(
                    "coordinates must be unique and sorted",
                ));
            }
        }
        Ok(Self {
            height,
            width,
            stride,
            channels,
            coords,
            features,
        })
    }

    /// Builds a map without validating coordinates. Callers guarantee the
    /// canonical-form invariants.
    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        stride: usize,
        channels: usize,
        coords: Vec<(u32, u32)>,
        features: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(features.len(), coords.len() * channels);
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        Self {
            height,
            width,
            stride,
            channels,
            coords,
            features,
        }
    }

    pub fn empty(height: usize, width: usize, stride: usize, channels: usize) -> Self {
        Self::from_parts_unchecked(height, width, stride, channels, Vec::new(), Vec::new())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f32] {
        &mut self.features
    }

    pub fn num_active(&self) -> usize {
        self.coords.len()
    }

    pub fn site_features(&self, i: usize) -> &[f32] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Fraction of grid sites that are active.
    pub fn density(&self) -> f64 {
        self.coords.len() as f64 / (self.height * self.width).max(1) as f64
    }

    /// Row-major `height × width` lookup from site to feature row, `-1` when
    /// inactive.
    pub fn index_grid(&self) -> Vec<i32> {
        let mut grid = vec![-1i32; self.height * self.width];
        for (i, &(r, c)) in self.coords.iter().enumerate() {
            grid[r as usize * self.width + c as usize] = i as i32;
        }
        grid
    }

    pub fn with_features(&self, channels: usize, features: Vec<f32>) -> Self {
        Self::from_parts_unchecked(
            self.height,
            self.width,
            self.stride,
            channels,
            self.coords.clone(),
            features,
        )
    }
}

/// Scatters active sites into a zero-initialized `(C, H, W)` tensor.
pub fn densify(s: &SparseFeatureMap) -> DenseTensor {
    let (h, w, c) = (s.height, s.width, s.channels);
    let mut out = DenseTensor::zeros(vec![c, h, w]);
    let plane = h * w;
    for (i, &(r, col)) in s.coords.iter().enumerate() {
        let base = r as usize * w + col as usize;
        for (ch, &v) in s.site_features(i).iter().enumerate() {
            out.data[ch * plane + base] = v;
        }
    }
    out
}

/// Collects sites where any channel exceeds `threshold` in magnitude.
pub fn sparsify(t: &DenseTensor, threshold: f32) -> Result<SparseFeatureMap> {
    sparsify_with_stride(t, threshold, 1)
}

pub fn sparsify_with_stride(
    t: &DenseTensor,
    threshold: f32,
    stride: usize,
) -> Result<SparseFeatureMap> {
    let (c, h, w) = t.dims3()?;
    let plane = h * w;
    let mut coords = Vec::new();
    let mut features = Vec::new();
    for r in 0..h {
        for col in 0..w {
            let base = r * w + col;
            if (0..c).any(|ch| t.data[ch * plane + base].abs() > threshold) {
                coords.push((r as u32, col as u32));
                features.extend((0..c).map(|ch| t.data[ch * plane + base]));
            }
        }
    }
    Ok(SparseFeatureMap::from_parts_unchecked(
        h, w, stride, c, coords, features,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One scale per index of the leading axis.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub granularity: Granularity,
    pub scales: Vec<f32>,
    pub zero_point: i32,
}

impl QuantizedTensor {
    pub fn new(
        shape: Vec<usize>,
        data: Vec<i8>,
        granularity: Granularity,
        scales: Vec<f32>,
        zero_point: i32,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        let groups = group_count(&shape, granularity);
        if scales.len() != groups {
            return Err(Error::invalid(format!(
                "expected {groups} scales, got {}",
                scales.len()
            )));
        }
        if scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("quantization scales must be positive"));
        }
        if !(-128..=127).contains(&zero_point) {
            return Err(Error::invalid("zero point outside int8 range"));
        }
        Ok(Self {
            shape,
            data,
            granularity,
            scales,
            zero_point,
        })
    }

    pub fn group_len(&self) -> usize {
        self.data.len() / self.scales.len().max(1)
    }

    /// Scale applying to flat element `i`.
    pub fn scale_at(&self, i: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerChannel => self.scales[i / self.group_len()],
        }
    }

    pub fn max_scale(&self) -> f32 {
        self.scales.iter().fold(0.0f32, |m, &s| m.max(s))
    }
}

fn group_count(shape: &[usize], granularity: Granularity) -> usize {
    match granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel => shape.first().copied().unwrap_or(1),
    }
}

/// Symmetric int8 quantization, `q = clamp(round(x / scale), -127, 127)` with
/// `scale = max|x| / 127` per group and zero point 0. An all-zero group gets
/// scale 1.
pub fn quantize_affine(t: &DenseTensor, granularity: Granularity) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::NonFinite("quantize_affine input"));
    }
    let groups = group_count(t.shape(), granularity).max(1);
    let group_len = t.len() / groups;
    let mut scales = Vec::with_capacity(groups);
    let mut data = Vec::with_capacity(t.len());
    for g in 0..groups {
        let chunk = &t.data[g * group_len..(g + 1) * group_len];
        let max_abs = chunk.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
        let inv = 1.0 / scale as f64;
        data.extend(
            chunk
                .iter()
                .map(|&x| (x as f64 * inv).round().clamp(-127.0, 127.0) as i8),
        );
        scales.push(scale);
    }
    Ok(QuantizedTensor {
        shape: t.shape.clone(),
        data,
        granularity,
        scales,
        zero_point: 0,
    })
}

/// Per-tensor asymmetric activation parameters covering `[min, max]`.
///
/// The range is widened to include zero so that inactive (zero) sites stay
/// exactly zero after a round trip.
pub fn activation_params(min: f32, max: f32) -> (f32, i32) {
    let lo = min.min(0.0);
    let hi = max.max(0.0);
    if hi - lo <= 0.0 {
        return (1.0, 0);
    }
    let scale = (hi - lo) / 255.0;
    let zero_point = (-128.0 - lo as f64 / scale as f64).round().clamp(-128.0, 127.0) as i32;
    (scale, zero_point)
}

pub fn quantize_asymmetric(t: &DenseTensor, scale: f32, zero_point: i32) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::NonFinite("activation quantization input"));
    }
    let inv = 1.0 / scale as f64;
    let data = t
        .data
        .iter()
        .map(|&x| ((x as f64 * inv).round() + zero_point as f64).clamp(-128.0, 127.0) as i8)
        .collect();
    QuantizedTensor::new(
        t.shape.clone(),
        data,
        Granularity::PerTensor,
        vec![scale],
        zero_point,
    )
}

pub fn dequantize(q: &QuantizedTensor) -> DenseTensor {
    let zp = q.zero_point;
    let group_len = q.group_len().max(1);
    let data = q
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = match q.granularity {
                Granularity::PerTensor => q.scales[0],
                Granularity::PerChannel => q.scales[i / group_len],
            };
            s * (v as i32 - zp) as f32
        })
        .collect();
    DenseTensor {
        shape: q.shape.clone(),
        data,
    }
}
