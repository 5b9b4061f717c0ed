//! Command-line surface. The binary only parses arguments and calls [`run`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::{Arch, Backbone, BackboneConfig};
use crate::bench::{
    bench_conv, bench_decoder, flops_table, BenchScope, ConvBenchConfig, DecoderBenchConfig, CONV_CSV_HEADER,
    DECODER_CSV_HEADER, FLOPS_CSV_HEADER,
};
use crate::decoder::{count_params_flops, hand_template, LayerKind, HAND_LEVELS};
use crate::error::{Error, Result};
use crate::io::{
    load_intrinsics_file, load_topology_file, quantize_store, read_predictions, save_intrinsics_file,
    save_topology_file, set_activation_ranges, write_predictions, PredictionRecord, StoredTensor, WeightStore,
};
use crate::lifting::CameraIntrinsics;
use crate::metrics::pa_mpjpe;
use crate::pipeline::{quantized_pipeline_delta, random_store, Model, ModelConfig};
use crate::preproc::{canny_edges, ensure_gray, fuse_image, sobel_edges, synth_sparse_input, write_pgm, FusedInput, Image, CANNY_HIGH, CANNY_LOW, INPUT_SIZE};
use crate::quant::{QuantMode, RangeObserver};
use crate::tensor::sparsity;

pub const SEED_ENV: &str = "SPLITE_SEED";

#[derive(Debug, Parser)]
#[command(name = "splite", version, about = "Sparse hand-mesh inference and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract an edge map and report its sparsity.
    Edge(EdgeArgs),
    /// Write random weights, a template topology and default intrinsics.
    Init(InitArgs),
    /// Run the full pipeline on one image.
    Infer(InferArgs),
    /// Sparse vs dense encoder throughput.
    BenchConv(BenchConvArgs),
    /// Decoder latency, quarter-channel vs full-channel layers.
    BenchDecoder(BenchDecoderArgs),
    /// Closed-form decoder parameter and FLOP table.
    Flops(FlopsArgs),
    /// Convert a weight file to int8.
    Quantize(QuantizeArgs),
    /// PA-MPJPE between prediction and ground-truth files.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Detector {
    Sobel,
    Canny,
}

#[derive(Debug, Args)]
pub struct EdgeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "sobel")]
    pub detector: Detector,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "resnet18")]
    pub arch: Arch,
    /// Small channel widths for quick experiments.
    #[arg(long)]
    pub tiny: bool,
    /// Store unfolded batch-norm parameters.
    #[arg(long)]
    pub batch_norm: bool,
    /// Set every bias to zero.
    #[arg(long)]
    pub zero_bias: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    /// Run int8 weights; a float store is quantized in memory and a delta
    /// report against the float pipeline is printed.
    #[arg(long)]
    pub quantized: bool,
    /// Also quantize activations; needs calibrated ranges in the store.
    #[arg(long)]
    pub int8_activations: bool,
    #[arg(long)]
    pub image_id: Option<String>,
    /// Write the record here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 9)]
    pub spiral_len: usize,
    #[arg(long)]
    pub sparse_stages: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchConvArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.80,0.85,0.90")]
    pub sparsities: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value = "resnet18")]
    pub arch: Arch,
    #[arg(long, default_value = "sparse-stages")]
    pub scope: BenchScope,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct BenchDecoderArgs {
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    #[arg(long, default_value_t = 5)]
    pub batches: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 48)]
    pub channels: usize,
    #[arg(long, default_value_t = 9)]
    pub spiral_len: usize,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Record activation ranges over this many synthetic inputs.
    #[arg(long, default_value_t = 0)]
    pub calibrate: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Score vertices instead of joints.
    #[arg(long)]
    pub vertices: bool,
}

/// Seed from `SPLITE_SEED`, default 0.
pub fn seed_from_env() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(0),
    }
}

/// Prefixes I/O failures with the offending path.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Image(img) => Error::Io(std::io::Error::other(format!("{}: {img}", path.display()))),
        other => other,
    })
}

/// 0 success, 1 validation failure, 2 I/O failure.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_io() => 2,
        Err(_) => 1,
    }
}

/// Runs one command; results go to `out`, diagnostics to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let seed = seed_from_env()?;
    match cli.command {
        Command::Edge(a) => cmd_edge(&a, out),
        Command::Init(a) => cmd_init(&a, seed, out),
        Command::Infer(a) => cmd_infer(&a, out, err),
        Command::BenchConv(a) => cmd_bench_conv(&a, seed, out),
        Command::BenchDecoder(a) => cmd_bench_decoder(&a, seed, out),
        Command::Flops(a) => cmd_flops(&a, out),
        Command::Quantize(a) => cmd_quantize(&a, seed, out),
        Command::Eval(a) => cmd_eval(&a, out),
    }
}

pub fn cmd_edge(a: &EdgeArgs, out: &mut dyn Write) -> Result<()> {
    let gray = ensure_gray(&at(&a.input, Image::load(&a.input))?)?;
    let edges = match a.detector {
        Detector::Sobel => sobel_edges(&gray)?,
        Detector::Canny => canny_edges(&gray, CANNY_LOW, CANNY_HIGH)?,
    };
    write_pgm(&a.out, &edges)?;
    writeln!(out, "sparsity {:.6}", sparsity(&edges, 0.0)?)?;
    Ok(())
}

pub fn cmd_init(a: &InitArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let backbone = if a.tiny {
        BackboneConfig {
            arch: a.arch,
            ..BackboneConfig::tiny()
        }
    } else {
        BackboneConfig::for_arch(a.arch)
    };
    let config = ModelConfig::new(backbone);
    let template = hand_template();
    let mut store = random_store(&config, &template.topology, seed, a.batch_norm);
    if a.zero_bias {
        let biases: Vec<(String, Vec<usize>)> = store
            .iter()
            .filter(|(n, _)| n.ends_with(".bias") && !n.contains(".bn"))
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for (name, shape) in biases {
            let n = shape.iter().product();
            store.insert_f32(name, shape, vec![0.0; n])?;
        }
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let weights = a.out_dir.join("weights.splw");
    store.save(&weights)?;
    save_topology_file(a.out_dir.join("topology.json"), &template.topology)?;
    save_intrinsics_file(a.out_dir.join("intrinsics.json"), &CameraIntrinsics::default())?;
    writeln!(
        out,
        "wrote {} ({} parameters) with topology.json and intrinsics.json",
        weights.display(),
        store.num_parameters()
    )?;
    Ok(())
}

fn load_image_input(path: &Path) -> Result<FusedInput> {
    let img = at(path, Image::load(path))?;
    let img = if img.width() != INPUT_SIZE || img.height() != INPUT_SIZE {
        img.resized(INPUT_SIZE, INPUT_SIZE)
    } else {
        img
    };
    Ok(fuse_image(&img)?.0)
}

pub fn cmd_infer(a: &InferArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let store = at(&a.weights, WeightStore::load(&a.weights))?;
    let topology = at(&a.topology, load_topology_file(&a.topology))?;
    let k = match &a.intrinsics {
        Some(p) => at(p, load_intrinsics_file(p))?,
        None => CameraIntrinsics::default(),
    };
    let image = at(&a.image, Image::load(&a.image))?;
    let image_id = a.image_id.clone().unwrap_or_else(|| {
        a.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let mut config = ModelConfig::from_store(&store, a.spiral_len)?;
    if let Some(s) = a.sparse_stages {
        config.backbone.sparse_stages = s;
    }
    let mode = if a.int8_activations {
        QuantMode::WeightsAndActivations
    } else {
        QuantMode::WeightsOnly
    };
    let already_int8 = store.iter().any(|(_, t)| matches!(t, StoredTensor::I8(_)));
    let run_store = if a.quantized && !already_int8 {
        quantize_store(&store)?
    } else {
        store.clone()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let quantize_delta = a.quantized && !already_int8;
    let (record, t, deltas) = pool.install(|| -> Result<_> {
        let model = Model::from_store(&run_store, &topology, &config, mode)?.with_workers(a.threads);
        let (record, t) = model.infer_image(&image, &k, &image_id)?;
        let deltas = if quantize_delta {
            let input = load_image_input(&a.image)?;
            quantized_pipeline_delta(&[(image_id.clone(), input)], &store, &run_store, &topology, &config, mode, &k)?
        } else {
            Vec::new()
        };
        Ok((record, t, deltas))
    })?;
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    writeln!(
        err,
        "timing preproc_ms={:.3} encode_ms={:.3} lift_ms={:.3} decode_ms={:.3} total_ms={:.3}",
        ms(t.preproc),
        ms(t.encode),
        ms(t.lift),
        ms(t.decode),
        ms(t.total())
    )?;
    for d in deltas {
        writeln!(
            err,
            "delta image={} mean_joint_mm={:.4} max_joint_mm={:.4} mean_vertex_mm={:.4} pa_mpjpe_mm={:.4}",
            d.image_id, d.mean_joint_delta_mm, d.max_joint_delta_mm, d.mean_vertex_delta_mm, d.pa_mpjpe_mm
        )?;
    }
    match &a.out {
        Some(p) => write_predictions(std::fs::File::create(p)?, &[record]),
        None => write_predictions(&mut *out, &[record]),
    }
}

pub fn cmd_bench_conv(a: &BenchConvArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let config = ConvBenchConfig {
        arch: a.arch,
        sparsities: a.sparsities.clone(),
        repeats: a.repeats,
        warmup: a.warmup,
        scope: a.scope,
        threads: a.threads,
        seed,
    };
    let rows = bench_conv(&config)?;
    writeln!(out, "{CONV_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn cmd_bench_decoder(a: &BenchDecoderArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let config = DecoderBenchConfig {
        repeats: a.repeats,
        batches: a.batches,
        threads: a.threads,
        seed,
        ..DecoderBenchConfig::default()
    };
    let r = bench_decoder(&config)?;
    writeln!(out, "{DECODER_CSV_HEADER}")?;
    for b in &r.batches {
        writeln!(out, "{}", b.to_csv())?;
    }
    let mean = |f: fn(&crate::bench::DecoderBatch) -> f64| r.batches.iter().map(f).sum::<f64>() / r.batches.len() as f64;
    let (s, f) = (mean(|b| b.splite_ms), mean(|b| b.spiralconv_pp_ms));
    writeln!(out, "# mean splite_ms={s:.4} spiralconv_pp_ms={f:.4} speedup={:.3}", f / s)?;
    writeln!(
        out,
        "# params splite={} spiralconv_pp={} flops splite={} spiralconv_pp={}",
        r.splite.params, r.spiralconv_pp.params, r.splite.flops, r.spiralconv_pp.flops
    )?;
    writeln!(out, "# deterministic={}", r.deterministic)?;
    Ok(())
}

pub fn cmd_flops(a: &FlopsArgs, out: &mut dyn Write) -> Result<()> {
    if a.channels == 0 || a.spiral_len == 0 {
        return Err(Error::invalid("channels and spiral length must be positive"));
    }
    writeln!(out, "{FLOPS_CSV_HEADER}")?;
    for row in flops_table(a.channels, a.spiral_len, &HAND_LEVELS) {
        writeln!(out, "{}", row.to_csv())?;
    }
    let unit = |k| count_params_flops(k, a.channels, a.spiral_len, &[1]).params;
    let full = count_params_flops(LayerKind::SpiralConvPP, a.channels, a.spiral_len, &HAND_LEVELS);
    let lite = count_params_flops(LayerKind::Splite, a.channels, a.spiral_len, &HAND_LEVELS);
    writeln!(
        out,
        "# unit params spiralconv_pp={} splite={} ratio={:.3}",
        unit(LayerKind::SpiralConvPP),
        unit(LayerKind::Splite),
        unit(LayerKind::SpiralConvPP) as f64 / unit(LayerKind::Splite) as f64
    )?;
    writeln!(
        out,
        "# total flops spiralconv_pp={} splite={} ratio={:.3}",
        full.flops,
        lite.flops,
        full.flops as f64 / lite.flops as f64
    )?;
    Ok(())
}

/// Records activation ranges of the float backbone over synthetic inputs.
pub fn calibrate(store: &WeightStore, config: &BackboneConfig, samples: usize, seed: u64) -> Result<RangeObserver> {
    let net = Backbone::from_store(store, config)?;
    let mut observer = RangeObserver::new();
    for i in 0..samples {
        let target = [0.80, 0.85, 0.90][i % 3];
        let edge = synth_sparse_input(INPUT_SIZE, INPUT_SIZE, target, seed.wrapping_add(i as u64))?;
        net.forward_observed(&FusedInput::from_edge_map(&edge)?, &mut observer)?;
    }
    Ok(observer)
}

pub fn cmd_quantize(a: &QuantizeArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let mut store = at(&a.weights, WeightStore::load(&a.weights))?;
    if a.calibrate > 0 {
        let config = ModelConfig::from_store(&store, 9)?;
        let observer = calibrate(&store, &config.backbone, a.calibrate, seed)?;
        set_activation_ranges(&mut store, observer.ranges());
    }
    let q = quantize_store(&store)?;
    q.save(&a.out)?;
    let f32_bytes = std::fs::metadata(&a.weights)?.len();
    let int8_bytes = std::fs::metadata(&a.out)?.len();
    writeln!(
        out,
        "f32_bytes={f32_bytes} int8_bytes={int8_bytes} ratio={:.4}",
        int8_bytes as f64 / f32_bytes as f64
    )?;
    Ok(())
}

/// Mean PA error in millimeters over records matched by image id.
pub fn evaluate(pred: &[PredictionRecord], gt: &[PredictionRecord], vertices: bool) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for g in gt {
        let p = pred
            .iter()
            .find(|p| p.image_id == g.image_id)
            .ok_or_else(|| Error::invalid(format!("no prediction for `{}`", g.image_id)))?;
        total += if vertices {
            pa_mpjpe(&p.vertices, &g.vertices)?
        } else {
            pa_mpjpe(&p.joints, &g.joints)?
        };
    }
    Ok(total / gt.len() as f64)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let pred = at(&a.pred, read_predictions(&a.pred))?;
    let gt = at(&a.gt, read_predictions(&a.gt))?;
    let err = evaluate(&pred, &gt, a.vertices)?;
    let name = if a.vertices { "pa_mpvpe_mm" } else { "pa_mpjpe_mm" };
    writeln!(out, "{name}={err:.4} n={}", gt.len())?;
    Ok(())
}
