use std::io::Write as _;
use std::path::PathBuf;

use clap::Args;

use crate::config;
use crate::e2e::{self, E2eConfig};
use crate::manifest::{ensure_out_dir, ManifestTimer};
use crate::CliResult;

#[derive(Debug, Args)]
pub struct E2eToyArgs {
    /// Optional JSON overriding the bundled configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for metrics, checkpoints and previews
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn run(args: E2eToyArgs, seed_override: Option<u64>) -> CliResult<()> {
    let timer = ManifestTimer::start();
    let mut cfg: E2eConfig = match &args.config {
        Some(path) => config::load_json(path)?,
        None => E2eConfig::default(),
    };
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg.train.seed = seed;
    } else {
        cfg.train.seed = cfg.seed;
    }
    ensure_out_dir(&args.out)?;

    let metrics = e2e::run(&cfg, Some(&args.out))?;
    config::save_json(&args.out.join("metrics.json"), &metrics)?;

    let mut csv = String::from("variant,mean_psnr,mean_ssim\n");
    for v in &metrics.variants {
        csv.push_str(&format!("{},{:.4},{:.6}\n", v.name, v.mean_psnr, v.mean_ssim));
    }
    std::fs::write(args.out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    std::io::stdout().flush()?;

    let seed = cfg.seed;
    timer.write(&args.out, "e2e-toy", seed, &cfg)?;
    Ok(())
}
