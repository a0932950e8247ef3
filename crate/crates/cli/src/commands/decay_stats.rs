use std::path::PathBuf;

use clap::Args;

use ev4d_core::analysis::{
    expectation_decay, expectation_no_decay, monte_carlo_noise, variance_decay, variance_no_decay,
    NoiseParams,
};

use crate::manifest::{ensure_out_dir, ManifestTimer};
use crate::CliResult;

#[derive(Debug, Args, serde::Serialize)]
pub struct DecayStatsArgs {
    /// Event counts to tabulate
    #[arg(long = "n", value_delimiter = ',', default_value = "10,100,1000")]
    pub n_values: Vec<u64>,
    /// P(polarity = +1)
    #[arg(long, default_value_t = 0.5)]
    pub p_pos: f64,
    /// Decay strength
    #[arg(long, default_value_t = 0.93)]
    pub b: f64,
    /// Monte Carlo trials (0 = closed forms only)
    #[arg(long, default_value_t = 100_000)]
    pub trials: u64,
    /// Optional output directory for stats.csv + manifest
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

pub fn run(args: DecayStatsArgs, seed_override: Option<u64>) -> CliResult<()> {
    let timer = ManifestTimer::start();
    let seed = seed_override.unwrap_or(0);
    let params = NoiseParams::new(args.p_pos)?;

    let mut csv = String::from(
        "n,mean_no_decay,var_no_decay,mean_decay,var_decay,mc_mean_decay,mc_var_decay\n",
    );
    println!(
        "{:>8} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "n", "E[no decay]", "Var[no decay]", "E[decay]", "Var[decay]", "MC mean", "MC var"
    );
    for &n in &args.n_values {
        let e0 = expectation_no_decay(n, &params);
        let v0 = variance_no_decay(n, &params);
        let e1 = expectation_decay(n, &params, args.b)?;
        let v1 = variance_decay(n, &params, args.b)?;
        let (mc_mean, mc_var) = if args.trials > 0 {
            monte_carlo_noise(n, &params, args.b, args.trials, seed)?
        } else {
            (f64::NAN, f64::NAN)
        };
        println!(
            "{n:>8} {e0:>14.4} {v0:>14.4} {e1:>14.4} {v1:>14.4} {mc_mean:>14.4} {mc_var:>14.4}"
        );
        csv.push_str(&format!("{n},{e0},{v0},{e1},{v1},{mc_mean},{mc_var}\n"));
    }

    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        std::fs::write(out.join("stats.csv"), &csv)?;
        timer.write(out, "decay-stats", seed, &args)?;
    }
    Ok(())
}
