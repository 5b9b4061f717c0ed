//! ResNet encoder over the fused edge input.
//!
//! Stem: 7×7 stride-2 generalized conv + ReLU, then 3×3 stride-2 generalized
//! max-pool, giving the 32×32 mid-resolution grid for a 128×128 input. The
//! four residual stages keep that grid: channel changes go through 1×1
//! projection shortcuts and every 3×3 conv is submanifold. Stages up to
//! `sparse_stages` run on active sites only; the rest run dense.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::conv::{
    conv_grid, dilate_mask, max_pool_grid, relu_in_place, sparse_conv2d, sparse_max_pool,
    ConvMode, ConvSpec, FeatureGrid,
};
use crate::error::{Error, Result};
use crate::io::store::{StoredTensor, WeightStore};
use crate::preproc::FusedInput;
use crate::quant::{qconv_grid, ActivationParams, QConvSpec, QuantGrid, RangeObserver};
use crate::tensor::{sparsify, DenseTensor, SparseFeatureMap};

pub const BN_EPS: f32 = 1e-5;
const POOL_KERNEL: usize = 3;
const POOL_STRIDE: usize = 2;
const STEM_KERNEL: usize = 7;
const STEM_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    ResNet18,
    ResNet50,
}

impl Arch {
    pub fn blocks(self) -> [usize; 4] {
        match self {
            Arch::ResNet18 => [2, 2, 2, 2],
            Arch::ResNet50 => [3, 4, 6, 3],
        }
    }

    pub fn expansion(self) -> usize {
        match self {
            Arch::ResNet18 => 1,
            Arch::ResNet50 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::ResNet18 => "resnet18",
            Arch::ResNet50 => "resnet50",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(Arch::ResNet18),
            "resnet50" => Ok(Arch::ResNet50),
            _ => Err(Error::invalid(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub arch: Arch,
    /// Base width per stage; bottleneck stages emit `4 ×` this.
    pub widths: [usize; 4],
    /// Width `C_g` of the feature grid head.
    pub feature_channels: usize,
    pub keypoints: usize,
    /// Stages (0–4) executed sparsely before densifying.
    pub sparse_stages: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::resnet18()
    }
}

impl BackboneConfig {
    pub fn resnet18() -> Self {
        Self {
            arch: Arch::ResNet18,
            widths: [64, 128, 256, 512],
            feature_channels: 256,
            keypoints: 21,
            sparse_stages: 2,
        }
    }

    pub fn resnet50() -> Self {
        Self {
            arch: Arch::ResNet50,
            ..Self::resnet18()
        }
    }

    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::ResNet18 => Self::resnet18(),
            Arch::ResNet50 => Self::resnet50(),
        }
    }

    /// Narrow network for tests and quick demos.
    pub fn tiny() -> Self {
        Self {
            arch: Arch::ResNet18,
            widths: [8, 8, 16, 16],
            feature_channels: 16,
            keypoints: 21,
            sparse_stages: 2,
        }
    }

    pub fn stem_channels(&self) -> usize {
        self.widths[0]
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.widths[stage] * self.arch.expansion()
    }

    pub fn final_channels(&self) -> usize {
        self.stage_channels(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.feature_channels == 0 || self.keypoints == 0 {
            return Err(Error::invalid("backbone widths must be positive"));
        }
        if self.sparse_stages > 4 {
            return Err(Error::invalid("sparse_stages must lie in 0..=4"));
        }
        Ok(())
    }
}

/// How the backbone executes its early layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Active sites only, up to the sparse cut.
    Sparse,
    /// Dense kernels with propagated active masks; numerically matches `Sparse`.
    DenseTwin,
    /// Plain dense network, the throughput baseline.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    /// `C_g × H/4 × W/4`.
    pub feature_grid: DenseTensor,
    /// `K × H/4 × W/4`.
    pub heatmap_logits: DenseTensor,
    pub depth_logits: Vec<f32>,
}

/// One convolution and where its parameters live.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSlot {
    pub conv: String,
    pub bn: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub mode: ConvMode,
    /// Last conv of a residual branch.
    pub tail: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockSlots {
    convs: Vec<ConvSlot>,
    shortcut: Option<ConvSlot>,
}

fn slot(conv: String, bn: String, cin: usize, cout: usize, k: usize, stride: usize, mode: ConvMode) -> ConvSlot {
    ConvSlot {
        conv,
        bn,
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        mode,
        tail: false,
    }
}

fn stem_slot(config: &BackboneConfig) -> ConvSlot {
    slot(
        "backbone.stem.conv".into(),
        "backbone.stem.bn".into(),
        3,
        config.stem_channels(),
        STEM_KERNEL,
        STEM_STRIDE,
        ConvMode::Generalized,
    )
}

fn stage_slots(config: &BackboneConfig) -> Vec<Vec<BlockSlots>> {
    let sub = ConvMode::Submanifold;
    let mut cin = config.stem_channels();
    let mut stages = Vec::new();
    for (s, &blocks) in config.arch.blocks().iter().enumerate() {
        let width = config.widths[s];
        let cout = config.stage_channels(s);
        let mut stage = Vec::new();
        for b in 0..blocks {
            let p = format!("backbone.stage{}.block{b}", s + 1);
            let name = |i: usize| (format!("{p}.conv{i}"), format!("{p}.bn{i}"));
            let mut convs = match config.arch {
                Arch::ResNet18 => {
                    let ((c1, b1), (c2, b2)) = (name(1), name(2));
                    vec![slot(c1, b1, cin, cout, 3, 1, sub), slot(c2, b2, cout, cout, 3, 1, sub)]
                }
                Arch::ResNet50 => {
                    let ((c1, b1), (c2, b2), (c3, b3)) = (name(1), name(2), name(3));
                    vec![
                        slot(c1, b1, cin, width, 1, 1, sub),
                        slot(c2, b2, width, width, 3, 1, sub),
                        slot(c3, b3, width, cout, 1, 1, sub),
                    ]
                }
            };
            convs.last_mut().unwrap().tail = true;
            let shortcut = (cin != cout).then(|| {
                slot(
                    format!("{p}.downsample.conv"),
                    format!("{p}.downsample.bn"),
                    cin,
                    cout,
                    1,
                    1,
                    sub,
                )
            });
            stage.push(BlockSlots { convs, shortcut });
            cin = cout;
        }
        stages.push(stage);
    }
    stages
}

/// Every conv slot in execution order.
pub fn conv_slots(config: &BackboneConfig) -> Vec<ConvSlot> {
    let mut out = vec![stem_slot(config)];
    for stage in stage_slots(config) {
        for block in stage {
            out.extend(block.convs);
            out.extend(block.shortcut);
        }
    }
    out
}

/// Parameter names and shapes. BN entries are listed only when `with_bn`.
pub fn parameter_shapes(config: &BackboneConfig, with_bn: bool) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for s in conv_slots(config) {
        out.push((
            format!("{}.weight", s.conv),
            vec![s.out_channels, s.in_channels, s.kernel, s.kernel],
        ));
        out.push((format!("{}.bias", s.conv), vec![s.out_channels]));
        if with_bn {
            for p in ["weight", "bias", "running_mean", "running_var"] {
                out.push((format!("{}.{p}", s.bn), vec![s.out_channels]));
            }
        }
    }
    let c = config.final_channels();
    let (cg, k) = (config.feature_channels, config.keypoints);
    out.push(("backbone.head.feature.weight".into(), vec![cg, c, 1, 1]));
    out.push(("backbone.head.feature.bias".into(), vec![cg]));
    out.push(("backbone.head.heatmap.weight".into(), vec![k, c, 1, 1]));
    out.push(("backbone.head.heatmap.bias".into(), vec![k]));
    out.push(("backbone.head.depth.weight".into(), vec![k, c]));
    out.push(("backbone.head.depth.bias".into(), vec![k]));
    out
}

/// Fills `store` with random backbone parameters. Residual branch tails are
/// damped so activations stay bounded through deep stacks.
pub fn init_random(store: &mut WeightStore, config: &BackboneConfig, rng: &mut impl Rng, with_bn: bool) {
    let uniform = |rng: &mut dyn rand::RngCore, n: usize, bound: f32| -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
    };
    for s in conv_slots(config) {
        let fan_in = (s.in_channels * s.kernel * s.kernel) as f32;
        let damp = if s.tail { 0.3 } else { 1.0 };
        let n = s.out_channels * s.in_channels * s.kernel * s.kernel;
        let w = uniform(rng, n, damp * (6.0 / fan_in).sqrt());
        let shape = vec![s.out_channels, s.in_channels, s.kernel, s.kernel];
        store.insert_f32(format!("{}.weight", s.conv), shape, w).unwrap();
        let b = uniform(rng, s.out_channels, 0.05);
        store.insert_f32(format!("{}.bias", s.conv), vec![s.out_channels], b).unwrap();
        if with_bn {
            let c = s.out_channels;
            let gamma = (0..c).map(|_| rng.random_range(0.8..1.2)).collect();
            let beta = uniform(rng, c, 0.05);
            let mean = uniform(rng, c, 0.05);
            let var = (0..c).map(|_| rng.random_range(0.8..1.2)).collect();
            for (p, v) in [("weight", gamma), ("bias", beta), ("running_mean", mean), ("running_var", var)] {
                store.insert_f32(format!("{}.{p}", s.bn), vec![c], v).unwrap();
            }
        }
    }
    let c = config.final_channels();
    let bound = (3.0 / c as f32).sqrt();
    for (head, out, gain) in [
        ("feature", config.feature_channels, 1.0),
        ("heatmap", config.keypoints, 2.0),
        ("depth", config.keypoints, 0.5),
    ] {
        let shape = if head == "depth" { vec![out, c] } else { vec![out, c, 1, 1] };
        let w = uniform(rng, out * c, gain * bound);
        store.insert_f32(format!("backbone.head.{head}.weight"), shape, w).unwrap();
        store
            .insert_f32(format!("backbone.head.{head}.bias"), vec![out], uniform(rng, out, 0.05))
            .unwrap();
    }
}

/// Per-channel `y = scale · x + shift` applied after a conv.
#[derive(Debug, Clone, PartialEq)]
struct ChannelAffine {
    scale: Vec<f32>,
    shift: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    conv: ConvSpec,
    bn: Option<ChannelAffine>,
    quantized: Option<QConvSpec>,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    convs: Vec<Layer>,
    shortcut: Option<Layer>,
}

/// A loaded, immutable encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Layer,
    stages: Vec<Vec<Block>>,
    feature_head: Layer,
    heatmap_head: Layer,
    depth_weight: Vec<f32>,
    depth_bias: Vec<f32>,
    activations: Option<ActivationParams>,
}

fn load_layer(store: &WeightStore, s: &ConvSlot, fold_bn: bool) -> Result<Layer> {
    let shape = [s.out_channels, s.in_channels, s.kernel, s.kernel];
    let mut w = store.f32_shaped(&format!("{}.weight", s.conv), &shape)?.into_data();
    let bias_name = format!("{}.bias", s.conv);
    let mut b = if store.contains(&bias_name) {
        store.f32_shaped(&bias_name, &[s.out_channels])?.into_data()
    } else {
        vec![0.0; s.out_channels]
    };
    let bn_params = ["weight", "bias", "running_mean", "running_var"];
    let present: Vec<bool> = bn_params
        .iter()
        .map(|p| store.contains(&format!("{}.{p}", s.bn)))
        .collect();
    let mut affine = None;
    if present.iter().any(|&p| p) {
        let mut v = Vec::with_capacity(4);
        for p in bn_params {
            v.push(store.f32_shaped(&format!("{}.{p}", s.bn), &[s.out_channels])?.into_data());
        }
        let (gamma, beta, mean, var) = (&v[0], &v[1], &v[2], &v[3]);
        let mut scale = Vec::with_capacity(s.out_channels);
        let mut shift = Vec::with_capacity(s.out_channels);
        for o in 0..s.out_channels {
            if var[o] < 0.0 {
                return Err(Error::invalid(format!("{}.running_var is negative", s.bn)));
            }
            let k = gamma[o] / (var[o] + BN_EPS).sqrt();
            scale.push(k);
            shift.push(beta[o] - mean[o] * k);
        }
        if fold_bn {
            let per_out = w.len() / s.out_channels;
            for o in 0..s.out_channels {
                for x in &mut w[o * per_out..(o + 1) * per_out] {
                    *x *= scale[o];
                }
                b[o] = b[o] * scale[o] + shift[o];
            }
        } else {
            affine = Some(ChannelAffine { scale, shift });
        }
    }
    let conv = ConvSpec::new(
        s.in_channels,
        s.out_channels,
        (s.kernel, s.kernel),
        s.stride,
        s.mode,
        w,
        b,
    )?;
    Ok(Layer {
        conv,
        bn: affine,
        quantized: None,
    })
}

impl Layer {
    fn finish(&self, values: &mut [f32]) {
        if let Some(bn) = &self.bn {
            let c = bn.scale.len();
            for site in values.chunks_mut(c) {
                for ((v, s), t) in site.iter_mut().zip(&bn.scale).zip(&bn.shift) {
                    *v = *v * s + t;
                }
            }
        }
    }
}

enum Feat {
    Sparse(SparseFeatureMap),
    Masked(FeatureGrid, Vec<bool>),
    Dense(FeatureGrid),
}

impl Feat {
    fn values_mut(&mut self) -> &mut [f32] {
        match self {
            Feat::Sparse(s) => s.features_mut(),
            Feat::Masked(g, _) | Feat::Dense(g) => &mut g.data,
        }
    }

    fn values(&self) -> &[f32] {
        match self {
            Feat::Sparse(s) => s.features(),
            Feat::Masked(g, _) | Feat::Dense(g) => &g.data,
        }
    }

    fn conv(&self, layer: &Layer) -> Result<Feat> {
        let spec = &layer.conv;
        let mut out = match self {
            Feat::Sparse(s) => Feat::Sparse(sparse_conv2d(s, spec)?),
            Feat::Dense(g) => Feat::Dense(conv_grid(g, spec)?),
            Feat::Masked(g, m) => {
                let out = conv_grid(g, spec)?;
                let mask = match spec.mode() {
                    ConvMode::Submanifold => m.clone(),
                    ConvMode::Generalized => {
                        dilate_mask(m, g.height, g.width, spec.kernel(), spec.stride()).0
                    }
                };
                Feat::Masked(out, mask)
            }
        };
        layer.finish(out.values_mut());
        if let Feat::Masked(g, m) = &mut out {
            g.apply_mask(m);
        }
        Ok(out)
    }

    fn pool(&self) -> Feat {
        match self {
            Feat::Sparse(s) => Feat::Sparse(sparse_max_pool(s, POOL_KERNEL, POOL_STRIDE)),
            Feat::Masked(g, m) => {
                let (g, m) = max_pool_grid(g, POOL_KERNEL, POOL_STRIDE, Some(m));
                Feat::Masked(g, m)
            }
            Feat::Dense(g) => Feat::Dense(max_pool_grid(g, POOL_KERNEL, POOL_STRIDE, None).0),
        }
    }

    fn add_assign(&mut self, other: &Feat) {
        for (a, b) in self.values_mut().iter_mut().zip(other.values()) {
            *a += b;
        }
    }

    fn into_grid(self) -> FeatureGrid {
        match self {
            Feat::Sparse(s) => FeatureGrid::from_sparse(&s),
            Feat::Masked(g, _) | Feat::Dense(g) => g,
        }
    }
}

struct Ctx<'a> {
    observer: Option<&'a mut RangeObserver>,
    activations: Option<&'a ActivationParams>,
}

impl Ctx<'_> {
    fn boundary(&mut self, name: &str, values: &mut [f32]) -> Result<Option<(f32, i32)>> {
        if let Some(obs) = self.observer.as_deref_mut() {
            obs.observe(name, values);
        }
        match self.activations {
            Some(a) => {
                let (s, zp) = a.get(name)?;
                crate::quant::fake_quant_in_place(values, s, zp);
                Ok(Some((s, zp)))
            }
            None => Ok(None),
        }
    }
}

/// Residual block; `q` is the quantized block input when it sits on an int8
/// boundary, in which case the first conv and the projection run in integer.
fn run_block(block: &Block, x: &Feat, q: Option<&QuantGrid>) -> Result<Feat> {
    let conv_in = |layer: &Layer| -> Result<Feat> {
        match (q, &layer.quantized) {
            (Some(q), Some(ql)) => {
                let mut g = qconv_grid(q, ql)?;
                layer.finish(&mut g.data);
                Ok(Feat::Dense(g))
            }
            _ => x.conv(layer),
        }
    };
    let mut y = conv_in(&block.convs[0])?;
    for layer in &block.convs[1..] {
        relu_in_place(y.values_mut());
        y = y.conv(layer)?;
    }
    match &block.shortcut {
        Some(sc) => y.add_assign(&conv_in(sc)?),
        None => y.add_assign(x),
    }
    relu_in_place(y.values_mut());
    Ok(y)
}

impl Backbone {
    /// Loads and folds batch norm into the preceding convs.
    pub fn from_store(store: &WeightStore, config: &BackboneConfig) -> Result<Self> {
        Self::load(store, config, true)
    }

    /// Loads keeping batch norm as a separate per-channel affine step.
    pub fn from_store_unfolded(store: &WeightStore, config: &BackboneConfig) -> Result<Self> {
        Self::load(store, config, false)
    }

    fn load(store: &WeightStore, config: &BackboneConfig, fold_bn: bool) -> Result<Self> {
        config.validate()?;
        let stem = load_layer(store, &stem_slot(config), fold_bn)?;
        let mut stages = Vec::new();
        for stage in stage_slots(config) {
            let mut blocks = Vec::new();
            for b in stage {
                blocks.push(Block {
                    convs: b
                        .convs
                        .iter()
                        .map(|s| load_layer(store, s, fold_bn))
                        .collect::<Result<_>>()?,
                    shortcut: b.shortcut.as_ref().map(|s| load_layer(store, s, fold_bn)).transpose()?,
                });
            }
            stages.push(blocks);
        }
        let c = config.final_channels();
        let head = |name: &str, out: usize| {
            let s = slot(format!("backbone.head.{name}"), String::new(), c, out, 1, 1, ConvMode::Submanifold);
            load_layer(store, &s, fold_bn)
        };
        let feature_head = head("feature", config.feature_channels)?;
        let heatmap_head = head("heatmap", config.keypoints)?;
        let k = config.keypoints;
        let depth_weight = store.f32_shaped("backbone.head.depth.weight", &[k, c])?.into_data();
        let depth_bias = store.f32_shaped("backbone.head.depth.bias", &[k])?.into_data();
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            feature_head,
            heatmap_head,
            depth_weight,
            depth_bias,
            activations: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Enables int8 activations at module boundaries. Dense-stage entry convs
    /// and the 1×1 heads switch to integer kernels.
    pub fn with_activation_quant(mut self, params: ActivationParams) -> Result<Self> {
        let cut = self.config.sparse_stages;
        for (s, stage) in self.stages.iter_mut().enumerate() {
            if s >= cut {
                let first = &mut stage[0];
                quantize_layer(&mut first.convs[0])?;
                if let Some(sc) = &mut first.shortcut {
                    quantize_layer(sc)?;
                }
            }
        }
        quantize_layer(&mut self.feature_head)?;
        quantize_layer(&mut self.heatmap_head)?;
        self.activations = Some(params);
        Ok(self)
    }

    pub fn activation_params(&self) -> Option<&ActivationParams> {
        self.activations.as_ref()
    }

    /// Names of activation boundaries in execution order.
    pub fn boundaries() -> [&'static str; 6] {
        ["input", "stem", "stage1", "stage2", "stage3", "stage4"]
    }

    pub fn forward(&self, input: &FusedInput, mode: ExecMode) -> Result<BackboneOutput> {
        let mut ctx = Ctx {
            observer: None,
            activations: self.activations.as_ref(),
        };
        self.run(input, mode, &mut ctx)
    }

    /// Float forward that records activation ranges at each boundary.
    pub fn forward_observed(&self, input: &FusedInput, observer: &mut RangeObserver) -> Result<BackboneOutput> {
        let mut ctx = Ctx {
            observer: Some(observer),
            activations: None,
        };
        self.run(input, ExecMode::Sparse, &mut ctx)
    }

    /// Runs the stem, pool and sparse stages only, returning the densified
    /// grid at the cut.
    pub fn run_sparse_stages(&self, input: &FusedInput, mode: ExecMode) -> Result<FeatureGrid> {
        let mut ctx = Ctx {
            observer: None,
            activations: self.activations.as_ref(),
        };
        let (grid, _) = self.encode_to_cut(input, mode, &mut ctx)?;
        Ok(grid)
    }

    fn encode_to_cut(&self, input: &FusedInput, mode: ExecMode, ctx: &mut Ctx) -> Result<(FeatureGrid, Option<(f32, i32)>)> {
        let t = input.tensor();
        if t.shape()[0] != self.stem.conv.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.stem.conv.in_channels(),
                actual: t.shape()[0],
            });
        }
        let mut x = match mode {
            ExecMode::Sparse => Feat::Sparse(sparsify(t, 0.0)?),
            ExecMode::DenseTwin => {
                let g = FeatureGrid::from_chw(t)?;
                let mask = g
                    .data
                    .chunks(g.channels)
                    .map(|site| site.iter().any(|v| *v != 0.0))
                    .collect();
                Feat::Masked(g, mask)
            }
            ExecMode::Dense => Feat::Dense(FeatureGrid::from_chw(t)?),
        };
        ctx.boundary("input", x.values_mut())?;
        let mut x = x.conv(&self.stem)?;
        relu_in_place(x.values_mut());
        let mut q = ctx.boundary("stem", x.values_mut())?;
        x = x.pool();
        for (s, stage) in self.stages.iter().enumerate().take(self.config.sparse_stages) {
            for block in stage {
                x = run_block(block, &x, None)?;
            }
            q = ctx.boundary(Self::boundaries()[s + 2], x.values_mut())?;
        }
        Ok((x.into_grid(), q))
    }

    fn run(&self, input: &FusedInput, mode: ExecMode, ctx: &mut Ctx) -> Result<BackboneOutput> {
        let (grid, mut q) = self.encode_to_cut(input, mode, ctx)?;
        let mut x = Feat::Dense(grid);
        for (s, stage) in self.stages.iter().enumerate().skip(self.config.sparse_stages) {
            for (b, block) in stage.iter().enumerate() {
                let qg = match (b, q) {
                    (0, Some((scale, zp))) => {
                        let Feat::Dense(g) = &x else { unreachable!() };
                        Some(QuantGrid::quantize(g, scale, zp))
                    }
                    _ => None,
                };
                x = run_block(block, &x, qg.as_ref())?;
            }
            q = ctx.boundary(Self::boundaries()[s + 2], x.values_mut())?;
        }
        let grid = x.into_grid();
        let qg = q.map(|(scale, zp)| QuantGrid::quantize(&grid, scale, zp));
        let head = |layer: &Layer| -> Result<FeatureGrid> {
            match (&qg, &layer.quantized) {
                (Some(q), Some(ql)) => qconv_grid(q, ql),
                _ => conv_grid(&grid, &layer.conv),
            }
        };
        let feature_grid = head(&self.feature_head)?.to_chw();
        let heatmap_logits = head(&self.heatmap_head)?.to_chw();

        let c = grid.channels;
        let sites = grid.height * grid.width;
        let mut pooled = vec![0.0f64; c];
        for site in grid.data.chunks(c) {
            for (p, v) in pooled.iter_mut().zip(site) {
                *p += *v as f64;
            }
        }
        let pooled: Vec<f32> = pooled.iter().map(|p| (p / sites as f64) as f32).collect();
        let depth_logits = self
            .depth_weight
            .chunks(c)
            .zip(&self.depth_bias)
            .map(|(row, b)| b + row.iter().zip(&pooled).map(|(w, p)| w * p).sum::<f32>())
            .collect();
        Ok(BackboneOutput {
            feature_grid,
            heatmap_logits,
            depth_logits,
        })
    }

    /// Multiply-accumulates of one dense forward at `height × width`.
    pub fn dense_macs(&self, height: usize, width: usize) -> u64 {
        let (mut h, mut w) = self.stem.conv.output_extent(height, width);
        let mut total = (h * w * self.stem.conv.macs_per_site()) as u64;
        h = h.div_ceil(POOL_STRIDE);
        w = w.div_ceil(POOL_STRIDE);
        let sites = (h * w) as u64;
        for stage in &self.stages {
            for b in stage {
                for l in b.convs.iter().chain(&b.shortcut) {
                    total += sites * l.conv.macs_per_site() as u64;
                }
            }
        }
        total += sites * (self.feature_head.conv.macs_per_site() + self.heatmap_head.conv.macs_per_site()) as u64;
        total + self.depth_weight.len() as u64
    }
}

fn quantize_layer(layer: &mut Layer) -> Result<()> {
    layer.quantized = Some(QConvSpec::from_conv(&layer.conv)?);
    Ok(())
}

/// True when the backbone's weights in `store` are int8.
pub fn store_is_quantized(store: &WeightStore) -> bool {
    matches!(store.get("backbone.stem.conv.weight"), Some(StoredTensor::I8(_)))
}
