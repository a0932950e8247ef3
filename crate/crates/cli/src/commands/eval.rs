use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;

use ev4d_core::analysis::{psnr, ssim};
use ev4d_core::events::IntensityFrame;
use ev4d_core::io;

use crate::manifest::{ensure_out_dir, ManifestTimer};
use crate::{CliError, CliResult};

#[derive(Debug, Args, serde::Serialize)]
pub struct EvalArgs {
    /// Directory of predicted frames (PFM or PPM)
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth frames with matching file names
    #[arg(long)]
    pub gt: PathBuf,
    /// Peak signal value
    #[arg(long, default_value_t = 1.0)]
    pub peak: f64,
    /// Optional binary mask (PFM, nonzero = evaluate): masked PSNR
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Optional output directory for metrics.csv + manifest
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn frame_names(dir: &Path) -> CliResult<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pfm") || n.ends_with(".ppm"))
        .collect();
    names.sort();
    Ok(names)
}

/// PSNR restricted to pixels where the mask is nonzero.
fn masked_psnr(a: &IntensityFrame, b: &IntensityFrame, mask: &IntensityFrame, peak: f64) -> CliResult<f64> {
    if a.width() != mask.width() || a.height() != mask.height() {
        return Err(CliError::config("mask shape does not match the frames"));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.get(x, y, 0) == 0.0 {
                continue;
            }
            for c in 0..a.channels() {
                let d = a.get(x, y, c) - b.get(x, y, c);
                se += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(CliError::config("mask selects no pixels"));
    }
    let mse = se / n as f64;
    Ok(if mse < 1e-12 { 99.0 } else { 10.0 * (peak * peak / mse).log10() })
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let timer = ManifestTimer::start();
    let names = frame_names(&args.pred)?;
    if names.is_empty() {
        return Err(CliError::config(format!("no frames in {}", args.pred.display())));
    }
    let mask = args.mask.as_deref().map(io::read_pfm_file).transpose()?;

    let mut csv = String::from("frame,psnr,ssim\n");
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    let mut count = 0usize;
    for name in &names {
        let gt_path = args.gt.join(name);
        if !gt_path.exists() {
            return Err(CliError::config(format!("missing ground truth for {name}")));
        }
        let pred = io::read_frame_auto(&args.pred.join(name))?;
        let gt = io::read_frame_auto(&gt_path)?;
        let p = match &mask {
            Some(m) => masked_psnr(&pred, &gt, m, args.peak)?,
            None => psnr(&pred, &gt, args.peak)?,
        };
        let s = ssim(&pred, &gt, args.peak)?;
        csv.push_str(&format!("{name},{p:.4},{s:.6}\n"));
        sum_psnr += p;
        sum_ssim += s;
        count += 1;
    }
    csv.push_str(&format!(
        "mean,{:.4},{:.6}\n",
        sum_psnr / count as f64,
        sum_ssim / count as f64
    ));
    print!("{csv}");
    std::io::stdout().flush()?;

    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        std::fs::write(out.join("metrics.csv"), &csv)?;
        timer.write(out, "eval", 0, &args)?;
    }
    Ok(())
}
