//! Parameter checkpoints, little-endian:
//!
//! ```text
//! "CSTP"  magic
//! u8      version (1)
//! u32     length of the JSON-encoded ModelConfig, then its bytes
//! u32     entry count
//! per entry:
//!   u16+UTF-8 parameter path (e.g. "col0.conv.kernel")
//!   u8      1 if trainable
//!   u8      rank, then rank × u32 dimensions
//!   f32 ×   values, row-major
//! ```
//!
//! Loading rebuilds the layout from the stored configuration and rejects any entry
//! whose name, order or shape disagrees with it.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::network::Network;
use super::params::skeleton;
use crate::data::{validate_config, ModelConfig};
use crate::error::{Error, Result};
use crate::ingest::bytes::{put_string, Reader};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSTP";
const VERSION: u8 = 1;

pub fn save_checkpoint<S: Scalar>(net: &Network<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    let cfg = serde_json::to_vec(&net.cfg).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let entries = net.params.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        put_string(&mut out, &e.name);
        out.push(u8::from(e.trainable));
        out.push(e.value.ndim() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.iter() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn load_checkpoint<S: Scalar>(buf: &[u8]) -> Result<Network<S>> {
    let mut r = Reader::new(buf);
    let perr = |e: crate::error::ParseError| bad(e.to_string());
    if r.take(4, "magic").map_err(perr)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u8("version").map_err(perr)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length").map_err(perr)? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len, "config").map_err(perr)?)?;
    let violations = validate_config(&cfg);
    if !violations.is_empty() {
        return Err(bad(format!("stored config is invalid: {}", violations[0])));
    }
    let (layout, mut params) = skeleton::<S>(&cfg);
    let count = r.u32("entry count").map_err(perr)? as usize;
    if count != params.len() {
        return Err(bad(format!(
            "checkpoint has {count} entries, configuration needs {}",
            params.len()
        )));
    }
    for entry in params.entries_mut() {
        let name = r.string("entry name").map_err(perr)?;
        if name != entry.name {
            return Err(bad(format!("expected entry {:?}, found {name:?}", entry.name)));
        }
        let _trainable = r.u8("trainable flag").map_err(perr)?;
        let rank = r.u8("rank").map_err(perr)? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()
            .map_err(perr)?;
        if dims != entry.value.shape() {
            return Err(bad(format!(
                "shape mismatch for {name}: checkpoint {dims:?}, model {:?}",
                entry.value.shape()
            )));
        }
        let total: usize = dims.iter().product();
        let values = (0..total)
            .map(|_| r.f32("value").map(|v| S::lit(v as f64)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(perr)?;
        entry.value = ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length matches");
    }
    if r.remaining() != 0 {
        return Err(bad(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Network::from_parts(cfg, layout, params))
}

pub fn write_checkpoint<S: Scalar>(path: impl AsRef<Path>, net: &Network<S>) -> Result<()> {
    std::fs::write(path, save_checkpoint(net))?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Network<S>> {
    let buf = std::fs::read(path.as_ref())?;
    load_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32() {
        let net = Network::<f32>::new(ModelConfig::miniature(), 3).unwrap();
        let back: Network<f32> = load_checkpoint(&save_checkpoint(&net)).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.cfg, net.cfg);
    }

    #[test]
    fn shape_mismatch_fails_loudly() {
        let net = Network::<f32>::new(ModelConfig::miniature(), 3).unwrap();
        let mut buf = save_checkpoint(&net);
        // tamper with the stored config so the first conv kernel shape changes
        let mut cfg = net.cfg.clone();
        cfg.columns[0].conv_filters += 1;
        let json = serde_json::to_vec(&cfg).unwrap();
        let old_len = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
        buf.splice(5..9 + old_len, [&(json.len() as u32).to_le_bytes()[..], &json[..]].concat());
        let err = load_checkpoint::<f32>(&buf).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn bad_magic() {
        assert!(load_checkpoint::<f64>(b"NOPE\x01").is_err());
    }
}
