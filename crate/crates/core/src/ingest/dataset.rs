//! Canonical dataset container written by `ingest`, little-endian:
//!
//! ```text
//! "EEGD"  magic
//! u8      version (1)
//! u32     trial count
//! per trial:
//!   u16+UTF-8 subject id, u16+UTF-8 trial id
//!   i32     label (-1 when unlabeled)
//!   u32     class count
//!   u32 C, u32 T
//!   C·T ×   f32 samples, row-major
//! ```

use std::path::Path;

use ndarray::Array2;

use super::bytes::{put_string, Reader};
use crate::data::Trial;
use crate::error::{ParseError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"EEGD";
const VERSION: u8 = 1;

pub fn write_dataset_bytes(trials: &[Trial<f32>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(trials.len() as u32).to_le_bytes());
    for t in trials {
        put_string(&mut out, &t.subject_id);
        put_string(&mut out, &t.trial_id);
        let label = t.label.map(|y| y as i32).unwrap_or(-1);
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(&(t.class_count as u32).to_le_bytes());
        let (c, n) = t.data.dim();
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for v in t.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_dataset_bytes(buf: &[u8]) -> Result<Vec<Trial<f32>>, ParseError> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(ParseError::BadMagic {
            expected: "EEGD".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(ParseError::Version(version));
    }
    let count = r.u32("trial count")? as usize;
    let mut trials = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.offset();
        let subject_id = r.string("subject id")?;
        let trial_id = r.string("trial id")?;
        let label = r.i32("label")?;
        let class_count = r.u32("class count")? as usize;
        let c_at = r.offset();
        let c = r.u32("channel count")? as usize;
        if c == 0 {
            return Err(ParseError::BadChannelCount { offset: c_at });
        }
        let n = r.u32("sample count")? as usize;
        let raw = r.take(4 * c * n, "trial samples")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let label = match label {
            -1 => None,
            y if y >= 0 => Some(y as usize),
            y => {
                return Err(ParseError::Invalid {
                    offset: at,
                    detail: format!("label {y}"),
                })
            }
        };
        let trial = Trial::new(
            subject_id,
            trial_id,
            Array2::from_shape_vec((c, n), data).expect("length checked"),
            label,
            class_count,
        )
        .map_err(|e| ParseError::Invalid {
            offset: at,
            detail: e.to_string(),
        })?;
        trials.push(trial);
    }
    if r.remaining() != 0 {
        return Err(ParseError::SizeMismatch {
            offset: r.offset(),
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(trials)
}

pub fn write_dataset(path: impl AsRef<Path>, trials: &[Trial<f32>]) -> Result<()> {
    std::fs::write(path, write_dataset_bytes(trials))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Trial<f32>>> {
    let path = path.as_ref();
    let buf = std::fs::read(path)?;
    read_dataset_bytes(&buf).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_with_unlabeled() {
        let trials = vec![
            Trial::new("S1", "S1/0/0", array![[1.0f32, 2.0], [3.0, 4.0]], Some(1), 2).unwrap(),
            Trial::new("S2", "S2/0/0", array![[-1.0f32, 0.5], [0.0, 9.0]], None, 2).unwrap(),
        ];
        let back = read_dataset_bytes(&write_dataset_bytes(&trials)).unwrap();
        assert_eq!(back, trials);
    }

    #[test]
    fn truncated() {
        let trials =
            vec![Trial::new("S1", "S1/0/0", array![[1.0f32, 2.0]], Some(0), 2).unwrap()];
        let buf = write_dataset_bytes(&trials);
        assert!(matches!(
            read_dataset_bytes(&buf[..buf.len() - 1]),
            Err(ParseError::Truncated { .. })
        ));
    }
}
