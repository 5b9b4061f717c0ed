//! Integer convolution, fake quantization and activation calibration.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::backbone::conv::{dense_neighbors, ConvSpec, FeatureGrid};
use crate::error::{Error, Result};
use crate::tensor::{
    activation_params, dequantize, quantize_affine, DenseTensor, Granularity, QuantizedTensor,
};

/// Which tensors run in int8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantMode {
    /// Int8 weights, f32 activations.
    #[default]
    WeightsOnly,
    /// Int8 weights and int8 activations at module boundaries.
    WeightsAndActivations,
}

/// Int8 convolution layer with per-output-channel symmetric weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QConvSpec {
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: usize,
    weights: QuantizedTensor,
    bias: Vec<f32>,
    // [kh * kw][in][out]
    packed: Vec<i8>,
}

impl QConvSpec {
    pub fn new(weights: QuantizedTensor, bias: Vec<f32>, stride: usize) -> Result<Self> {
        let [out_channels, in_channels, kh, kw] = weights.shape[..] else {
            return Err(Error::invalid("int8 conv weights must be rank 4"));
        };
        if weights.granularity != Granularity::PerChannel || weights.zero_point != 0 {
            return Err(Error::invalid("int8 conv weights must be per-channel symmetric"));
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![out_channels],
                actual: vec![bias.len()],
            });
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let taps = kh * kw;
        let mut packed = vec![0i8; weights.data.len()];
        for o in 0..out_channels {
            for i in 0..in_channels {
                for t in 0..taps {
                    packed[(t * in_channels + i) * out_channels + o] =
                        weights.data[(o * in_channels + i) * taps + t];
                }
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel: (kh, kw),
            stride,
            weights,
            bias,
            packed,
        })
    }

    /// Quantizes an `f32` layer per output channel.
    pub fn from_conv(spec: &ConvSpec) -> Result<Self> {
        let (kh, kw) = spec.kernel();
        let w = DenseTensor::new(
            vec![spec.out_channels(), spec.in_channels(), kh, kw],
            spec.weights().to_vec(),
        )?;
        Self::new(
            quantize_affine(&w, Granularity::PerChannel)?,
            spec.bias().to_vec(),
            spec.stride(),
        )
    }

    pub fn weights(&self) -> &QuantizedTensor {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Dequantized weights as an `f32` layer.
    pub fn to_f32(&self) -> Result<ConvSpec> {
        ConvSpec::new(
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.stride,
            crate::backbone::conv::ConvMode::Generalized,
            dequantize(&self.weights).into_data(),
            self.bias.clone(),
        )
    }

    /// Accumulated rounding bound `s_in · max s_w · K / 2`.
    pub fn error_bound(&self, input_scale: f32) -> f32 {
        let k = (self.kernel.0 * self.kernel.1 * self.in_channels) as f32;
        input_scale * self.weights.max_scale() * k * 0.5
    }
}

/// Per-tensor asymmetric int8 grid, site-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<i8>,
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantGrid {
    pub fn quantize(grid: &FeatureGrid, scale: f32, zero_point: i32) -> Self {
        let data = grid
            .data
            .iter()
            .map(|&v| quantize_value(v, scale, zero_point))
            .collect();
        Self {
            height: grid.height,
            width: grid.width,
            channels: grid.channels,
            data,
            scale,
            zero_point,
        }
    }

    pub fn dequantize(&self) -> FeatureGrid {
        FeatureGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|&q| dequantize_value(q, self.scale, self.zero_point))
                .collect(),
        }
    }
}

fn quantize_value(v: f32, scale: f32, zero_point: i32) -> i8 {
    ((v as f64 * (1.0 / scale as f64)).round() + zero_point as f64).clamp(-128.0, 127.0) as i8
}

fn dequantize_value(q: i8, scale: f32, zero_point: i32) -> f32 {
    scale * (q as i32 - zero_point) as f32
}

/// Integer convolution of a quantized grid.
pub fn qconv_grid(input: &QuantGrid, spec: &QConvSpec) -> Result<FeatureGrid> {
    if input.channels != spec.in_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.in_channels,
            actual: input.channels,
        });
    }
    let (nbr, oh, ow) = dense_neighbors(input.height, input.width, spec.kernel, spec.stride);
    let taps = spec.kernel.0 * spec.kernel.1;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let worst = taps as i64 * cin as i64 * 255 * 127;
    let checked = worst > i32::MAX as i64;
    let zp = input.zero_point;

    let mut acc = vec![0i32; oh * ow * cout];
    let overflow = acc
        .par_chunks_mut(cout)
        .zip(nbr.par_chunks(taps))
        .map(|(acc, row)| {
            for (t, &n) in row.iter().enumerate() {
                if n < 0 {
                    continue;
                }
                let src = &input.data[n as usize * cin..(n as usize + 1) * cin];
                for (ci, &q) in src.iter().enumerate() {
                    let a = q as i32 - zp;
                    if a == 0 {
                        continue;
                    }
                    let wrow = &spec.packed[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                    if checked {
                        for (o, &w) in acc.iter_mut().zip(wrow) {
                            match o.checked_add(a * w as i32) {
                                Some(v) => *o = v,
                                None => return true,
                            }
                        }
                    } else {
                        for (o, &w) in acc.iter_mut().zip(wrow) {
                            *o += a * w as i32;
                        }
                    }
                }
            }
            false
        })
        .reduce(|| false, |a, b| a || b);
    if overflow {
        return Err(Error::AccumulatorOverflow);
    }

    let mut out = FeatureGrid::zeros(oh, ow, cout);
    for (dst, src) in out.data.chunks_mut(cout).zip(acc.chunks(cout)) {
        for (o, (d, &a)) in dst.iter_mut().zip(src).enumerate() {
            *d = input.scale * spec.weights.scale_at(o * spec.weights.group_len()) * a as f32
                + spec.bias[o];
        }
    }
    Ok(out)
}

/// Int8 cross-correlation of a `(C, H, W)` per-tensor quantized input.
pub fn qconv2d(input: &QuantizedTensor, spec: &QConvSpec) -> Result<DenseTensor> {
    if input.granularity != Granularity::PerTensor || input.scales.len() != 1 {
        return Err(Error::invalid("qconv2d input needs a single per-tensor scale"));
    }
    let [c, h, w] = input.shape[..] else {
        return Err(Error::invalid("qconv2d input must be (C, H, W)"));
    };
    let plane = h * w;
    let mut data = vec![0i8; c * plane];
    for ch in 0..c {
        for s in 0..plane {
            data[s * c + ch] = input.data[ch * plane + s];
        }
    }
    let grid = QuantGrid {
        height: h,
        width: w,
        channels: c,
        data,
        scale: input.scales[0],
        zero_point: input.zero_point,
    };
    Ok(qconv_grid(&grid, spec)?.to_chw())
}

/// Fixed quantization parameters for [`fake_quant`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub granularity: Granularity,
    pub scales: Vec<f32>,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i32) -> Self {
        Self {
            granularity: Granularity::PerTensor,
            scales: vec![scale],
            zero_point,
        }
    }

    /// Asymmetric per-tensor parameters covering the observed range of `t`.
    pub fn from_range(t: &DenseTensor) -> Self {
        let (lo, hi) = min_max(t.data());
        let (s, zp) = activation_params(lo, hi);
        Self::per_tensor(s, zp)
    }
}

/// `dequantize(quantize(t))` with fixed parameters.
pub fn fake_quant(t: &DenseTensor, params: &QuantParams) -> Result<DenseTensor> {
    let group = match params.granularity {
        Granularity::PerTensor => {
            if params.scales.len() != 1 {
                return Err(Error::invalid("per-tensor params need one scale"));
            }
            t.len().max(1)
        }
        Granularity::PerChannel => {
            let c = t.shape().first().copied().unwrap_or(0);
            if params.scales.len() != c || c == 0 {
                return Err(Error::invalid("per-channel params need one scale per leading index"));
            }
            t.len() / c
        }
    };
    if params.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid("scales must be positive and finite"));
    }
    let zp = params.zero_point;
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = params.scales[i / group];
            dequantize_value(quantize_value(v, s, zp), s, zp)
        })
        .collect();
    DenseTensor::new(t.shape().to_vec(), data)
}

pub(crate) fn fake_quant_in_place(v: &mut [f32], scale: f32, zero_point: i32) {
    for x in v {
        *x = dequantize_value(quantize_value(*x, scale, zero_point), scale, zero_point);
    }
}

pub(crate) fn min_max(v: &[f32]) -> (f32, f32) {
    v.iter()
        .fold((0.0f32, 0.0f32), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Running min/max per activation boundary, filled during calibration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RangeObserver {
    ranges: BTreeMap<String, (f32, f32)>,
}

impl RangeObserver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, boundary: &str, values: &[f32]) {
        let (lo, hi) = min_max(values);
        let e = self.ranges.entry(boundary.to_string()).or_insert((lo, hi));
        e.0 = e.0.min(lo);
        e.1 = e.1.max(hi);
    }

    pub fn ranges(&self) -> &BTreeMap<String, (f32, f32)> {
        &self.ranges
    }

    /// `(scale, zero_point)` per boundary.
    pub fn params(&self) -> ActivationParams {
        ActivationParams {
            params: self
                .ranges
                .iter()
                .map(|(k, &(lo, hi))| (k.clone(), activation_params(lo, hi)))
                .collect(),
        }
    }
}

/// Calibrated activation quantization parameters keyed by boundary name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationParams {
    pub params: BTreeMap<String, (f32, i32)>,
}

impl ActivationParams {
    pub fn get(&self, boundary: &str) -> Result<(f32, i32)> {
        self.params
            .get(boundary)
            .copied()
            .ok_or_else(|| Error::MissingParameter(format!("quant.act.{boundary}.range")))
    }
}
