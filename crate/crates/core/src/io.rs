//! File formats: EVT1 event files, PFM float images, PPM previews and the
//! camera JSON layout.
//!
//! EVT1: magic "EVT1", width u16, height u16, c_pos f32, c_neg f32,
//! count u64, all little-endian, then `count` records of
//! (t_us u64, x u16, y u16, p i8, pad u8).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, IntensityFrame, Thresholds};

const EVT1_MAGIC: &[u8; 4] = b"EVT1";

/// Writes a stream plus its generation thresholds as an EVT1 file.
pub fn write_evt1<W: Write>(w: &mut W, stream: &EventStream, thresholds: &Thresholds) -> Result<()> {
    w.write_all(EVT1_MAGIC)?;
    w.write_u16::<LittleEndian>(stream.width)?;
    w.write_u16::<LittleEndian>(stream.height)?;
    w.write_f32::<LittleEndian>(thresholds.c_pos as f32)?;
    w.write_f32::<LittleEndian>(thresholds.c_neg as f32)?;
    w.write_u64::<LittleEndian>(stream.events.len() as u64)?;
    for e in &stream.events {
        w.write_u64::<LittleEndian>(e.t)?;
        w.write_u16::<LittleEndian>(e.x)?;
        w.write_u16::<LittleEndian>(e.y)?;
        w.write_i8(e.p)?;
        w.write_u8(0)?;
    }
    Ok(())
}

pub fn write_evt1_file(path: &Path, stream: &EventStream, thresholds: &Thresholds) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_evt1(&mut w, stream, thresholds)?;
    w.flush()?;
    Ok(())
}

/// Reads an EVT1 file back into a stream and its thresholds.
pub fn read_evt1<R: Read>(r: &mut R) -> Result<(EventStream, Thresholds)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EVT1_MAGIC {
        return Err(Error::Format(format!("bad EVT1 magic {magic:?}")));
    }
    let width = r.read_u16::<LittleEndian>()?;
    let height = r.read_u16::<LittleEndian>()?;
    let c_pos = f64::from(r.read_f32::<LittleEndian>()?);
    let c_neg = f64::from(r.read_f32::<LittleEndian>()?);
    let count = r.read_u64::<LittleEndian>()?;
    let thresholds = Thresholds::new(c_pos, c_neg)
        .map_err(|e| Error::Format(format!("bad thresholds in EVT1 header: {e}")))?;
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let t = r.read_u64::<LittleEndian>()?;
        let x = r.read_u16::<LittleEndian>()?;
        let y = r.read_u16::<LittleEndian>()?;
        let p = r.read_i8()?;
        let _pad = r.read_u8()?;
        if p != 1 && p != -1 {
            return Err(Error::Format(format!("bad polarity {p} in EVT1 record")));
        }
        events.push(Event::new(t, x, y, p));
    }
    Ok((EventStream::new(width, height, events), thresholds))
}

pub fn read_evt1_file(path: &Path) -> Result<(EventStream, Thresholds)> {
    let mut r = BufReader::new(File::open(path)?);
    read_evt1(&mut r)
}

/// Writes a 1- or 3-channel float frame as PFM (little-endian scale marker,
/// scanlines bottom-to-top per the format).
pub fn write_pfm<W: Write>(w: &mut W, frame: &IntensityFrame) -> Result<()> {
    let header = if frame.channels() == 3 { "PF" } else { "Pf" };
    write!(w, "{}\n{} {}\n-1.0\n", header, frame.width(), frame.height())?;
    for y in (0..frame.height()).rev() {
        for x in 0..frame.width() {
            for c in 0..frame.channels() {
                w.write_f32::<LittleEndian>(frame.get(x, y, c) as f32)?;
            }
        }
    }
    Ok(())
}

pub fn write_pfm_file(path: &Path, frame: &IntensityFrame) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pfm(&mut w, frame)?;
    w.flush()?;
    Ok(())
}

fn read_pfm_token<R: Read>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(byte[0] as char);
    }
}

pub fn read_pfm<R: Read>(r: &mut R) -> Result<IntensityFrame> {
    let magic = read_pfm_token(r)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    };
    let width: usize = read_pfm_token(r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM width".into()))?;
    let height: usize = read_pfm_token(r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM height".into()))?;
    let scale: f64 = read_pfm_token(r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    if scale >= 0.0 {
        return Err(Error::Format("big-endian PFM not supported".into()));
    }
    let mut data = vec![0.0f64; width * height * channels];
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                data[(y * width + x) * channels + c] = f64::from(r.read_f32::<LittleEndian>()?);
            }
        }
    }
    IntensityFrame::from_vec(width, height, channels, data)
}

pub fn read_pfm_file(path: &Path) -> Result<IntensityFrame> {
    let mut r = BufReader::new(File::open(path)?);
    read_pfm(&mut r)
}

/// Writes an 8-bit P6 preview; values clamped to [0, 1] and scaled to 255.
/// Single-channel frames are replicated to grey.
pub fn write_ppm<W: Write>(w: &mut W, frame: &IntensityFrame) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", frame.width(), frame.height())?;
    let mut row = Vec::with_capacity(frame.width() * 3);
    for y in 0..frame.height() {
        row.clear();
        for x in 0..frame.width() {
            for c in 0..3 {
                let v = if frame.channels() == 3 {
                    frame.get(x, y, c)
                } else {
                    frame.get(x, y, 0)
                };
                row.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&row)?;
    }
    Ok(())
}

pub fn write_ppm_file(path: &Path, frame: &IntensityFrame) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm(&mut w, frame)?;
    w.flush()?;
    Ok(())
}

pub fn read_ppm<R: Read>(r: &mut R) -> Result<IntensityFrame> {
    let magic = read_pfm_token(r)?;
    if magic != "P6" {
        return Err(Error::Format(format!("bad PPM magic {magic:?}")));
    }
    let width: usize = read_pfm_token(r)?.parse().map_err(|_| Error::Format("bad PPM width".into()))?;
    let height: usize = read_pfm_token(r)?.parse().map_err(|_| Error::Format("bad PPM height".into()))?;
    let maxval: f64 = read_pfm_token(r)?.parse().map_err(|_| Error::Format("bad PPM maxval".into()))?;
    let mut raw = vec![0u8; width * height * 3];
    r.read_exact(&mut raw)?;
    let data = raw.iter().map(|&b| f64::from(b) / maxval).collect();
    IntensityFrame::from_vec(width, height, 3, data)
}

pub fn read_ppm_file(path: &Path) -> Result<IntensityFrame> {
    let mut r = BufReader::new(File::open(path)?);
    read_ppm(&mut r)
}

/// Reads either PFM or PPM depending on the file extension.
pub fn read_frame_auto(path: &Path) -> Result<IntensityFrame> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm_file(path),
        Some("ppm") => read_ppm_file(path),
        other => Err(Error::Format(format!("unsupported frame extension {other:?}"))),
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCK";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained segment model: parameters plus the context needed to render
/// it (global time span, reconstruction volume).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: crate::field::FieldParams,
    pub span: crate::multiseg::SegmentSpan,
    pub bounds: crate::field::CylinderBounds,
}

/// Versioned binary checkpoint with an architecture header.
pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    let arch = &ck.params.arch;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(ck.span.t_start)?;
    w.write_u64::<LittleEndian>(ck.span.t_end)?;
    w.write_f64::<LittleEndian>(ck.bounds.radius)?;
    w.write_f64::<LittleEndian>(ck.bounds.y_min)?;
    w.write_f64::<LittleEndian>(ck.bounds.y_max)?;
    w.write_u32::<LittleEndian>(arch.encoding.n_spatial_freqs as u32)?;
    w.write_u32::<LittleEndian>(arch.encoding.n_temporal_freqs as u32)?;
    w.write_u32::<LittleEndian>(arch.encoding.n_dir_freqs as u32)?;
    w.write_u8(u8::from(arch.encoding.include_identity))?;
    w.write_u32::<LittleEndian>(arch.hidden_layers as u32)?;
    w.write_u32::<LittleEndian>(arch.hidden_dim as u32)?;
    w.write_u32::<LittleEndian>(arch.color_hidden_dim as u32)?;
    w.write_u64::<LittleEndian>(ck.params.data.len() as u64)?;
    for v in &ck.params.data {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

pub fn write_checkpoint_file(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    use crate::field::{Architecture, CylinderBounds, EncodingConfig, FieldParams};
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let t_start = r.read_u64::<LittleEndian>()?;
    let t_end = r.read_u64::<LittleEndian>()?;
    let radius = r.read_f64::<LittleEndian>()?;
    let y_min = r.read_f64::<LittleEndian>()?;
    let y_max = r.read_f64::<LittleEndian>()?;
    let n_spatial_freqs = r.read_u32::<LittleEndian>()? as usize;
    let n_temporal_freqs = r.read_u32::<LittleEndian>()? as usize;
    let n_dir_freqs = r.read_u32::<LittleEndian>()? as usize;
    let include_identity = r.read_u8()? != 0;
    let hidden_layers = r.read_u32::<LittleEndian>()? as usize;
    let hidden_dim = r.read_u32::<LittleEndian>()? as usize;
    let color_hidden_dim = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let arch = Architecture {
        encoding: EncodingConfig {
            n_spatial_freqs,
            n_temporal_freqs,
            n_dir_freqs,
            include_identity,
            anneal_alpha: f64::INFINITY,
        },
        hidden_layers,
        hidden_dim,
        color_hidden_dim,
    };
    if count != arch.param_count() {
        return Err(Error::Format(format!(
            "checkpoint parameter count {count} does not match its architecture ({})",
            arch.param_count()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    let params = FieldParams { arch, data };
    params.validate().map_err(|e| Error::Format(format!("corrupt checkpoint: {e}")))?;
    Ok(Checkpoint {
        params,
        span: crate::multiseg::SegmentSpan { t_start, t_end },
        bounds: CylinderBounds::new(radius, y_min, y_max)
            .map_err(|e| Error::Format(format!("corrupt checkpoint bounds: {e}")))?,
    })
}

pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
