//! Short encoder and decoder benchmarks.

use splite::bench::{bench_conv, bench_decoder, ConvBenchConfig, DecoderBenchConfig, CONV_CSV_HEADER};

fn main() -> splite::Result<()> {
    let rows = bench_conv(&ConvBenchConfig { repeats: 5, warmup: 1, ..ConvBenchConfig::default() })?;
    println!("{CONV_CSV_HEADER}");
    for r in rows {
        println!("{}", r.to_csv());
    }
    let report = bench_decoder(&DecoderBenchConfig { repeats: 10, batches: 3, ..DecoderBenchConfig::default() })?;
    for b in &report.batches {
        println!("batch {}: splite {:.3} ms, spiralconv++ {:.3} ms, speedup {:.2}", b.batch, b.splite_ms, b.spiralconv_pp_ms, b.speedup());
    }
    println!("params {} vs {}", report.splite.params, report.spiralconv_pp.params);
    Ok(())
}
