//! MRC2014 image stacks: mode 2 (32-bit float), little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fbcoeff::ByteCursor;
use crate::image::ImageStack;

const HEADER_LEN: usize = 1024;
const LABEL_LEN: usize = 80;
const MAX_LABELS: usize = 10;

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Serializes `stack` as a mode-2 MRC2014 stack with up to ten 80-byte
/// text labels.
pub fn write_mrc_bytes(stack: &ImageStack, labels: &[String]) -> Result<Vec<u8>> {
    let (l, n) = (stack.side(), stack.len());
    let dim = |v: usize| i32::try_from(v).map_err(|_| Error::Shape(format!("dimension {v} too large for MRC")));
    let (nx, ny, nz) = (dim(l)?, dim(l)?, dim(n)?);
    let mut h = vec![0u8; HEADER_LEN];
    put_i32(&mut h, 0, nx);
    put_i32(&mut h, 4, ny);
    put_i32(&mut h, 8, nz);
    put_i32(&mut h, 12, 2);
    put_i32(&mut h, 28, nx);
    put_i32(&mut h, 32, ny);
    put_i32(&mut h, 36, nz);
    let d = stack.pixel_size() as f32;
    put_f32(&mut h, 40, nx as f32 * d);
    put_f32(&mut h, 44, ny as f32 * d);
    put_f32(&mut h, 48, nz as f32 * d);
    for off in [52, 56, 60] {
        put_f32(&mut h, off, 90.0);
    }
    put_i32(&mut h, 64, 1);
    put_i32(&mut h, 68, 2);
    put_i32(&mut h, 72, 3);
    let vals: Vec<f32> = stack.data().iter().map(|&v| v as f32).collect();
    let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
    for &v in &vals {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v as f64;
    }
    let mean = if vals.is_empty() { 0.0 } else { sum / vals.len() as f64 };
    let rms = if vals.is_empty() {
        0.0
    } else {
        (vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
    };
    if vals.is_empty() {
        lo = 0.0;
        hi = 0.0;
    }
    put_f32(&mut h, 76, lo);
    put_f32(&mut h, 80, hi);
    put_f32(&mut h, 84, mean as f32);
    h[104..108].copy_from_slice(b"MRCO");
    put_i32(&mut h, 108, 20140);
    h[208..212].copy_from_slice(b"MAP ");
    h[212..216].copy_from_slice(&[0x44, 0x44, 0, 0]);
    put_f32(&mut h, 216, rms as f32);
    let labels: Vec<&String> = labels.iter().take(MAX_LABELS).collect();
    put_i32(&mut h, 220, labels.len() as i32);
    for (j, lab) in labels.iter().enumerate() {
        let bytes = lab.as_bytes();
        let len = bytes.len().min(LABEL_LEN);
        let off = 224 + j * LABEL_LEN;
        h[off..off + len].copy_from_slice(&bytes[..len]);
        h[off + len..off + LABEL_LEN].fill(b' ');
    }
    let mut out = h;
    out.reserve(4 * vals.len());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_mrc(stack: &ImageStack, path: &Path, labels: &[String]) -> Result<()> {
    fs::write(path, write_mrc_bytes(stack, labels)?)?;
    Ok(())
}

/// Parsed stack and its text labels.
pub fn read_mrc_bytes(bytes: &[u8]) -> Result<(ImageStack, Vec<String>)> {
    let mut cur = ByteCursor::new(bytes);
    let nx = cur.i32("nx")?;
    let ny = cur.i32("ny")?;
    let nz = cur.i32("nz")?;
    let mode = cur.i32("mode")?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[208..212] != b"MAP " {
        return Err(Error::format(208, format!("bad map tag {:?}, expected \"MAP \"", &bytes[208..212])));
    }
    if bytes[212] == 0x11 {
        return Err(Error::format(212, "big-endian MRC files are not supported"));
    }
    if mode != 2 {
        return Err(Error::format(12, format!("unsupported mode {mode}, only mode 2 (float32) is read")));
    }
    if nx <= 0 || ny <= 0 || nz < 0 {
        return Err(Error::format(0, format!("invalid dimensions {nx} x {ny} x {nz}")));
    }
    if nx != ny {
        return Err(Error::format(4, format!("frames must be square, got {nx} x {ny}")));
    }
    let mut at = ByteCursor::new(bytes);
    at.pos = 40;
    let cella_x = at.f32("cella")?;
    at.pos = 92;
    let nsymbt = at.i32("nsymbt")?;
    if nsymbt < 0 {
        return Err(Error::format(92, format!("negative extended header size {nsymbt}")));
    }
    at.pos = 220;
    let nlabl = (at.i32("nlabl")?.clamp(0, MAX_LABELS as i32)) as usize;
    let labels = (0..nlabl)
        .map(|j| {
            let off = 224 + j * LABEL_LEN;
            String::from_utf8_lossy(&bytes[off..off + LABEL_LEN]).trim_end().to_string()
        })
        .collect();
    let (side, n) = (nx as usize, nz as usize);
    let start = HEADER_LEN + nsymbt as usize;
    let need = start + 4 * side * side * n;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated data: {} bytes, expected {need}", bytes.len()),
        ));
    }
    cur.pos = start;
    let mut data = Vec::with_capacity(side * side * n);
    for _ in 0..side * side * n {
        data.push(cur.f32("pixel")? as f64);
    }
    let pixel_size = if cella_x > 0.0 && cella_x.is_finite() { cella_x as f64 / side as f64 } else { 1.0 };
    let stack = ImageStack::with_pixel_size(n, side, pixel_size, data).map_err(|e| match e {
        Error::Numeric(m) => Error::format(start as u64, m),
        other => other,
    })?;
    Ok((stack, labels))
}

pub fn read_mrc(path: &Path) -> Result<ImageStack> {
    Ok(read_mrc_bytes(&fs::read(path)?)?.0)
}

/// Stack and labels from a file.
pub fn read_mrc_with_labels(path: &Path) -> Result<(ImageStack, Vec<String>)> {
    read_mrc_bytes(&fs::read(path)?)
}
