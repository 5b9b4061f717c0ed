//! Throughput benchmarks for the sparse encoder and the mesh decoder.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, Arch, Backbone, BackboneConfig, ExecMode};
use crate::decoder::{self, count_params_flops, hand_template, Decoder, DecoderConfig, LayerCost, LayerKind};
use crate::error::{Error, Result};
use crate::io::WeightStore;
use crate::preproc::{synth_sparse_input, FusedInput, INPUT_SIZE};
use crate::tensor::DenseTensor;

pub const CONV_CSV_HEADER: &str = "arch,mode,sparsity,fps";
pub const DECODER_CSV_HEADER: &str = "batch,splite_ms,spiralconv_pp_ms,speedup";
pub const FLOPS_CSV_HEADER: &str = "kind,level,vertices,params,flops";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BenchScope {
    /// Stem, pool and the sparse stages only.
    #[default]
    SparseStages,
    Full,
}

impl FromStr for BenchScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse-stages" => Ok(Self::SparseStages),
            "full" => Ok(Self::Full),
            _ => Err(Error::invalid(format!("unknown bench scope `{s}`"))),
        }
    }
}

impl fmt::Display for BenchScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SparseStages => "sparse-stages",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBenchConfig {
    pub arch: Arch,
    pub sparsities: Vec<f64>,
    pub repeats: usize,
    pub warmup: usize,
    pub scope: BenchScope,
    pub threads: usize,
    pub seed: u64,
}

impl Default for ConvBenchConfig {
    fn default() -> Self {
        Self {
            arch: Arch::ResNet18,
            sparsities: vec![0.80, 0.85, 0.90],
            repeats: 50,
            warmup: 5,
            scope: BenchScope::SparseStages,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub arch: Arch,
    pub mode: &'static str,
    pub sparsity: f64,
    pub fps: f64,
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{:.2},{:.3}", self.arch, self.mode, self.sparsity, self.fps)
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let [arch, mode, sparsity, fps] = f[..] else {
            return Err(Error::Malformed(format!("expected 4 fields: `{line}`")));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Malformed(format!("{s}: {e}")));
        let mode = match mode {
            "sparse" => "sparse",
            "dense" => "dense",
            other => return Err(Error::Malformed(format!("unknown mode `{other}`"))),
        };
        Ok(Self {
            arch: arch.parse()?,
            mode,
            sparsity: num(sparsity)?,
            fps: num(fps)?,
        })
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))
}

/// Sparse vs dense backbone FPS at each sparsity. Runs are interleaved
/// across sparsities and modes so drift affects all rows alike.
pub fn bench_conv(config: &ConvBenchConfig) -> Result<Vec<BenchRow>> {
    if config.repeats == 0 || config.sparsities.is_empty() {
        return Err(Error::invalid("need at least one repeat and one sparsity"));
    }
    let net_config = BackboneConfig::for_arch(config.arch);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = WeightStore::new();
    backbone::init_random(&mut store, &net_config, &mut rng, false);
    let net = Backbone::from_store(&store, &net_config)?;
    let inputs = config
        .sparsities
        .iter()
        .map(|&s| FusedInput::from_edge_map(&synth_sparse_input(INPUT_SIZE, INPUT_SIZE, s, config.seed)?))
        .collect::<Result<Vec<_>>>()?;
    let modes = [(ExecMode::Sparse, "sparse"), (ExecMode::Dense, "dense")];
    let run = |x: &FusedInput, mode: ExecMode| -> Result<()> {
        match config.scope {
            BenchScope::SparseStages => net.run_sparse_stages(x, mode).map(drop),
            BenchScope::Full => net.forward(x, mode).map(drop),
        }
    };
    pool(config.threads)?.install(|| {
        for x in &inputs {
            for (mode, _) in modes {
                for _ in 0..config.warmup {
                    run(x, mode)?;
                }
            }
        }
        let mut total = vec![[Duration::ZERO; 2]; inputs.len()];
        for _ in 0..config.repeats {
            for (x, t) in inputs.iter().zip(&mut total) {
                for (m, (mode, _)) in modes.iter().enumerate() {
                    let start = Instant::now();
                    run(x, *mode)?;
                    t[m] += start.elapsed();
                }
            }
        }
        let mut rows = Vec::new();
        for (&s, t) in config.sparsities.iter().zip(&total) {
            for (m, (_, name)) in modes.iter().enumerate() {
                rows.push(BenchRow {
                    arch: config.arch,
                    mode: name,
                    sparsity: s,
                    fps: config.repeats as f64 / t[m].as_secs_f64(),
                });
            }
        }
        Ok(rows)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBenchConfig {
    pub repeats: usize,
    pub batches: usize,
    pub channels: usize,
    pub spiral_len: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for DecoderBenchConfig {
    fn default() -> Self {
        Self {
            repeats: 50,
            batches: 5,
            channels: 48,
            spiral_len: 9,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderBatch {
    pub batch: usize,
    pub splite_ms: f64,
    pub spiralconv_pp_ms: f64,
}

impl DecoderBatch {
    pub fn speedup(&self) -> f64 {
        self.spiralconv_pp_ms / self.splite_ms
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.3}",
            self.batch,
            self.splite_ms,
            self.spiralconv_pp_ms,
            self.speedup()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBenchReport {
    pub batches: Vec<DecoderBatch>,
    pub splite: LayerCost,
    pub spiralconv_pp: LayerCost,
    /// Every repeat produced the same mesh.
    pub deterministic: bool,
}

fn decoder_for(kind: LayerKind, config: &DecoderBenchConfig, levels: usize, topo: &decoder::MeshTopology) -> Result<Decoder> {
    let dc = DecoderConfig {
        channels: config.channels,
        spiral_len: config.spiral_len,
        input_channels: config.channels,
        kind,
    };
    let mut store = WeightStore::new();
    decoder::init_random(&mut store, &dc, levels, &mut ChaCha8Rng::seed_from_u64(config.seed));
    Decoder::from_store(&store, topo, &dc)
}

/// Times both decoder stacks on the same input; each batch is the mean of
/// `repeats` interleaved runs.
pub fn bench_decoder(config: &DecoderBenchConfig) -> Result<DecoderBenchReport> {
    if config.repeats == 0 || config.batches == 0 {
        return Err(Error::invalid("need at least one repeat and one batch"));
    }
    let template = hand_template();
    let topo = &template.topology;
    let levels = topo.levels.len();
    let splite = decoder_for(LayerKind::Splite, config, levels, topo)?;
    let full = decoder_for(LayerKind::SpiralConvPP, config, levels, topo)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let n = topo.levels[0].vertices * config.channels;
    let x = DenseTensor::new(
        vec![topo.levels[0].vertices, config.channels],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let workers = config.threads.max(1);
    let reference = (splite.decode(&x, workers)?, full.decode(&x, workers)?);
    for _ in 0..5 {
        splite.decode(&x, workers)?;
        full.decode(&x, workers)?;
    }
    let mut deterministic = true;
    let mut batches = Vec::with_capacity(config.batches);
    for batch in 0..config.batches {
        let (mut ts, mut tf) = (Duration::ZERO, Duration::ZERO);
        for _ in 0..config.repeats {
            let start = Instant::now();
            let a = splite.decode(&x, workers)?;
            ts += start.elapsed();
            let start = Instant::now();
            let b = full.decode(&x, workers)?;
            tf += start.elapsed();
            deterministic &= a == reference.0 && b == reference.1;
        }
        let ms = |d: Duration| d.as_secs_f64() * 1e3 / config.repeats as f64;
        batches.push(DecoderBatch {
            batch,
            splite_ms: ms(ts),
            spiralconv_pp_ms: ms(tf),
        });
    }
    let counts = topo.vertex_counts();
    Ok(DecoderBenchReport {
        batches,
        splite: count_params_flops(LayerKind::Splite, config.channels, config.spiral_len, &counts),
        spiralconv_pp: count_params_flops(LayerKind::SpiralConvPP, config.channels, config.spiral_len, &counts),
        deterministic,
    })
}

/// Per-level closed-form cost rows for both layer kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsRow {
    pub kind: LayerKind,
    pub level: usize,
    pub vertices: usize,
    pub cost: LayerCost,
}

impl FlopsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.kind.name(),
            self.level,
            self.vertices,
            self.cost.params,
            self.cost.flops
        )
    }
}

pub fn flops_table(channels: usize, spiral_len: usize, level_vertices: &[usize]) -> Vec<FlopsRow> {
    let mut rows = Vec::new();
    for kind in [LayerKind::SpiralConvPP, LayerKind::Splite] {
        for (level, &v) in level_vertices.iter().enumerate() {
            rows.push(FlopsRow {
                kind,
                level,
                vertices: v,
                cost: count_params_flops(kind, channels, spiral_len, &[v]),
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_rows_have_expected_shape() {
        let config = ConvBenchConfig {
            sparsities: vec![0.8, 0.9],
            repeats: 1,
            warmup: 0,
            ..ConvBenchConfig::default()
        };
        let rows = bench_conv(&config).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!(r.fps > 0.0);
            let back = BenchRow::from_csv(&r.to_csv()).unwrap();
            assert_eq!(back.to_csv(), r.to_csv());
        }
        assert_eq!(CONV_CSV_HEADER.split(',').count(), 4);
    }

    #[test]
    fn decoder_report_counts_match_closed_form() {
        let config = DecoderBenchConfig {
            repeats: 2,
            batches: 1,
            ..DecoderBenchConfig::default()
        };
        let r = bench_decoder(&config).unwrap();
        assert!(r.deterministic);
        let total: u64 = flops_table(48, 9, &decoder::HAND_LEVELS)
            .iter()
            .filter(|row| row.kind == LayerKind::Splite)
            .map(|row| row.cost.params)
            .sum();
        assert_eq!(r.splite.params, total);
        assert_eq!(r.splite.params, 5 * 5232);
    }

    #[test]
    fn scope_parses() {
        for s in [BenchScope::SparseStages, BenchScope::Full] {
            assert_eq!(s.to_string().parse::<BenchScope>().unwrap(), s);
        }
        assert!("x".parse::<BenchScope>().is_err());
    }
}
