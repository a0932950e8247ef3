use std::path::PathBuf;

use clap::Args;

use ev4d_core::analysis::crf_fit;

use crate::manifest::{ensure_out_dir, ManifestTimer};
use crate::{CliError, CliResult};

#[derive(Debug, Args, serde::Serialize)]
pub struct CrfFitArgs {
    /// CSV of `exposure,value` samples (optional header line)
    #[arg(long)]
    pub input: PathBuf,
    /// Full-scale recorded value, for saturation exclusion
    #[arg(long, default_value_t = 1.0)]
    pub full_scale: f64,
    /// Disable the 3-RMS outlier rejection pass
    #[arg(long)]
    pub no_outlier_clip: bool,
    /// Optional output directory for fit.json + manifest
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn parse_samples(text: &str) -> CliResult<Vec<(f64, f64)>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let a = parts.next().map(str::trim);
        let b = parts.next().map(str::trim);
        match (a.and_then(|v| v.parse::<f64>().ok()), b.and_then(|v| v.parse::<f64>().ok())) {
            (Some(x), Some(y)) => samples.push((x, y)),
            _ if i == 0 => continue, // header line
            _ => {
                return Err(CliError::config(format!("cannot parse CSV line {}: {line:?}", i + 1)));
            }
        }
    }
    Ok(samples)
}

pub fn run(args: CrfFitArgs) -> CliResult<()> {
    let timer = ManifestTimer::start();
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", args.input.display())))?;
    let samples = parse_samples(&text)?;
    let fit = crf_fit(&samples, args.full_scale, !args.no_outlier_clip)?;

    let json = serde_json::json!({
        "slope": fit.slope,
        "epsilon": fit.epsilon,
        "residual_rms": fit.residual_rms,
        "n_used": fit.n_used,
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("json"));

    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        crate::config::save_json(&out.join("fit.json"), &json)?;
        timer.write(out, "crf-fit", 0, &args)?;
    }
    Ok(())
}
