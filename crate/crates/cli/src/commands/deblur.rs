use std::path::PathBuf;

use clap::Args;

use ev4d_core::accum::DecayAccumulator;
use ev4d_core::edi::{edi_deblur, esi_synthesize, ExposureWindow};
use ev4d_core::io;

use crate::manifest::{ensure_out_dir, ManifestTimer};
use crate::{CliError, CliResult};

#[derive(Debug, Args, serde::Serialize)]
pub struct DeblurArgs {
    /// EVT1 event file covering the exposure
    #[arg(long)]
    pub events: PathBuf,
    /// Blurry single-channel PFM frame
    #[arg(long)]
    pub blurry: PathBuf,
    /// Exposure start, microseconds
    #[arg(long)]
    pub exposure_start: u64,
    /// Exposure end, microseconds
    #[arg(long)]
    pub exposure_end: u64,
    /// Reference timestamps to synthesize, microseconds
    #[arg(long = "t-ref", value_delimiter = ',')]
    pub t_ref: Vec<u64>,
    /// Output directory
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn run(args: DeblurArgs) -> CliResult<()> {
    let timer = ManifestTimer::start();
    let (stream, thresholds) = io::read_evt1_file(&args.events)?;
    let blurry = io::read_pfm_file(&args.blurry)?;
    if blurry.channels() != 1 {
        return Err(CliError::config("the blurry frame must be single-channel (mosaiced)"));
    }
    let window = ExposureWindow::new(args.exposure_start, args.exposure_end)?;
    let index = DecayAccumulator::build(&stream, &thresholds, 1.0)?;

    ensure_out_dir(&args.out)?;
    let sharp = edi_deblur(&blurry, &window, &index, 8)?;
    io::write_pfm_file(&args.out.join("deblurred.pfm"), &sharp)?;
    io::write_ppm_file(&args.out.join("deblurred.ppm"), &sharp)?;

    for &t in &args.t_ref {
        let frame = esi_synthesize(&sharp, window.t_start, &index, t)?;
        io::write_pfm_file(&args.out.join(format!("frame_{t:010}.pfm")), &frame)?;
    }
    timer.write(&args.out, "deblur", 0, &args)?;
    Ok(())
}
