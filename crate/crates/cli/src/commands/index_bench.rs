use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ev4d_core::accum::DecayAccumulator;
use ev4d_core::events::naive_accumulate;
use ev4d_core::io;

use crate::manifest::{ensure_out_dir, ManifestTimer};
use crate::CliResult;

#[derive(Debug, Args, serde::Serialize)]
pub struct IndexBenchArgs {
    /// EVT1 event file to index
    #[arg(long)]
    pub events: PathBuf,
    /// Accumulation decay of the index
    #[arg(long, default_value_t = 0.93)]
    pub decay: f64,
    /// Number of random windows for the fast-query timing
    #[arg(long, default_value_t = 200)]
    pub windows: usize,
    /// Number of windows also run through the naive scan
    #[arg(long, default_value_t = 10)]
    pub naive_windows: usize,
    /// Optional output directory for a machine-readable report
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, serde::Serialize)]
pub struct BenchReport {
    pub n_events: usize,
    pub decay: f64,
    pub build_ms: f64,
    pub fast_query_us: f64,
    pub naive_query_us: f64,
    pub speedup: f64,
    pub max_rel_error: f64,
}

pub fn bench(
    stream: &ev4d_core::events::EventStream,
    thresholds: &ev4d_core::events::Thresholds,
    decay: f64,
    n_windows: usize,
    n_naive: usize,
    seed: u64,
) -> CliResult<BenchReport> {
    let t_min = stream.events.first().map_or(0, |e| e.t);
    let t_max = stream.events.last().map_or(1, |e| e.t).max(t_min + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows: Vec<(u64, u64)> = (0..n_windows.max(1))
        .map(|_| {
            let a = rng.gen_range(t_min..=t_max);
            let b = rng.gen_range(t_min..=t_max);
            (a.min(b), a.max(b))
        })
        .collect();

    let t = Instant::now();
    let index = DecayAccumulator::build(stream, thresholds, decay)?;
    let build_ms = t.elapsed().as_secs_f64() * 1e3;

    // warm, then time the fast path
    std::hint::black_box(index.query_window(windows[0].0, windows[0].1)?);
    let t = Instant::now();
    for &(a, b) in &windows {
        std::hint::black_box(index.query_window(a, b)?);
    }
    let fast_query_us = t.elapsed().as_secs_f64() * 1e6 / windows.len() as f64;

    let naive_set = &windows[..n_naive.clamp(1, windows.len())];
    let t = Instant::now();
    for &(a, b) in naive_set {
        std::hint::black_box(naive_accumulate(stream, a, b, thresholds, decay)?);
    }
    let naive_query_us = t.elapsed().as_secs_f64() * 1e6 / naive_set.len() as f64;

    let mut max_rel_error = 0.0f64;
    for &(a, b) in naive_set {
        let fast = index.query_window(a, b)?;
        let naive = naive_accumulate(stream, a, b, thresholds, decay)?;
        for (f, n) in fast.values().iter().zip(naive.values()) {
            max_rel_error = max_rel_error.max((f - n).abs() / (1.0 + n.abs()));
        }
    }

    Ok(BenchReport {
        n_events: stream.len(),
        decay,
        build_ms,
        fast_query_us,
        naive_query_us,
        speedup: naive_query_us / fast_query_us,
        max_rel_error,
    })
}

pub fn run(args: IndexBenchArgs, seed_override: Option<u64>) -> CliResult<()> {
    let timer = ManifestTimer::start();
    let seed = seed_override.unwrap_or(0);
    let (stream, thresholds) = io::read_evt1_file(&args.events)?;
    let report = bench(&stream, &thresholds, args.decay, args.windows, args.naive_windows, seed)?;

    println!("events            {}", report.n_events);
    println!("decay             {}", report.decay);
    println!("build time        {:.2} ms", report.build_ms);
    println!("fast query mean   {:.2} us", report.fast_query_us);
    println!("naive query mean  {:.2} us", report.naive_query_us);
    println!("speedup           {:.1}x", report.speedup);
    println!("max rel error     {:.3e}", report.max_rel_error);

    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        crate::config::save_json(&out.join("bench.json"), &report)?;
        timer.write(out, "index-bench", seed, &args)?;
    }
    Ok(())
}
