//! `EEGA` array format, all little-endian:
//!
//! ```text
//! "EEGA"  magic
//! u8      version (1)
//! u32     channel count C (>= 1)
//! u64     sample count L
//! f64     sampling rate in Hz
//! C ×     u16 length + UTF-8 channel label
//! C·L ×   f32 samples, row-major (channel by channel)
//! u32     annotation count A
//! A ×     f64 onset seconds, u16 length + UTF-8 label
//! ```

use std::path::Path;

use ndarray::Array2;

use super::bytes::{put_string, Reader};
use super::{Annotation, Recording};
use crate::error::{ParseError, Result};

pub const ARRAY_MAGIC: &[u8; 4] = b"EEGA";
const VERSION: u8 = 1;

pub fn write_array_bytes(rec: &Recording) -> Vec<u8> {
    let (c, l) = rec.signals.dim();
    let mut out = Vec::with_capacity(32 + 4 * c * l);
    out.extend_from_slice(ARRAY_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(l as u64).to_le_bytes());
    out.extend_from_slice(&rec.fs.to_le_bytes());
    for label in &rec.channel_labels {
        put_string(&mut out, label);
    }
    for v in rec.signals.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(rec.annotations.len() as u32).to_le_bytes());
    for a in &rec.annotations {
        out.extend_from_slice(&a.onset.to_le_bytes());
        put_string(&mut out, &a.label);
    }
    out
}

pub fn read_array_bytes(buf: &[u8]) -> Result<Recording, ParseError> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != ARRAY_MAGIC {
        return Err(ParseError::BadMagic {
            expected: "EEGA".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(ParseError::Version(version));
    }
    let c_at = r.offset();
    let c = r.u32("channel count")? as usize;
    if c == 0 {
        return Err(ParseError::BadChannelCount { offset: c_at });
    }
    let l = r.u64("sample count")? as usize;
    let fs_at = r.offset();
    let fs = r.f64("sampling rate")?;
    if !(fs.is_finite() && fs > 0.0) {
        return Err(ParseError::Invalid {
            offset: fs_at,
            detail: format!("sampling rate {fs}"),
        });
    }
    let labels = (0..c)
        .map(|_| r.string("channel label"))
        .collect::<Result<Vec<_>, _>>()?;
    let payload = c
        .checked_mul(l)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n <= r.remaining())
        .ok_or_else(|| ParseError::SizeMismatch {
            offset: r.offset(),
            detail: format!("{c}x{l} float32 samples exceed the {} remaining bytes", r.remaining()),
        })?;
    let raw = r.take(payload, "samples")?;
    let samples: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let signals = Array2::from_shape_vec((c, l), samples).expect("payload length checked");
    let count = r.u32("annotation count")? as usize;
    let mut annotations = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let onset = r.f64("annotation onset")?;
        let label = r.string("annotation label")?;
        annotations.push(Annotation { onset, label });
    }
    if r.remaining() != 0 {
        return Err(ParseError::SizeMismatch {
            offset: r.offset(),
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(Recording {
        channel_labels: labels,
        fs,
        signals,
        annotations,
    })
}

pub fn write_array_file(path: impl AsRef<Path>, rec: &Recording) -> Result<()> {
    std::fs::write(path, write_array_bytes(rec))?;
    Ok(())
}

pub fn read_array_file(path: impl AsRef<Path>) -> Result<Recording> {
    let path = path.as_ref();
    let buf = std::fs::read(path)?;
    read_array_bytes(&buf).map_err(|e| e.at(path))
}
