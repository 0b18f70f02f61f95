//! EDF / EDF+ (continuous) reader.
//!
//! Layout: a 256-byte fixed ASCII header, then 256 bytes of per-signal fields stored
//! field-major (all labels, then all transducers, …), then data records holding each
//! signal's samples as 16-bit little-endian two's-complement integers.

use std::path::Path;

use ndarray::Array2;

use super::{Annotation, Recording};
use crate::error::{ParseError, Result};

pub const ANNOTATION_LABEL: &str = "EDF Annotations";

#[derive(Clone, Debug, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub header_bytes: usize,
    pub reserved: String,
    pub record_count: i64,
    pub record_duration: f64,
    pub signal_count: usize,
    pub signals: Vec<EdfSignalHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfSignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i64,
    pub digital_max: i64,
    pub prefiltering: String,
    pub samples_per_record: usize,
}

impl EdfSignalHeader {
    /// Slope and offset of the digital → physical map.
    pub fn scaling(&self) -> (f64, f64) {
        let gain = (self.physical_max - self.physical_min)
            / (self.digital_max - self.digital_min) as f64;
        let offset = self.physical_min - gain * self.digital_min as f64;
        (gain, offset)
    }

    pub fn to_physical(&self, digital: i16) -> f64 {
        self.physical_min
            + (digital as f64 - self.digital_min as f64) * (self.physical_max - self.physical_min)
                / (self.digital_max - self.digital_min) as f64
    }

    pub fn is_annotation(&self) -> bool {
        self.label == ANNOTATION_LABEL
    }
}

fn ascii(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).trim().to_string()
}

fn field<'a>(buf: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8], ParseError> {
    buf.get(offset..offset + len).ok_or_else(|| ParseError::Truncated {
        offset: buf.len(),
        what: format!("header field {what} at {offset}..{}", offset + len),
    })
}

fn int_field(buf: &[u8], offset: usize, len: usize, what: &str) -> Result<i64, ParseError> {
    let text = ascii(field(buf, offset, len, what)?);
    text.parse().map_err(|_| ParseError::NonNumeric {
        field: what.to_string(),
        offset,
        text,
    })
}

fn float_field(buf: &[u8], offset: usize, len: usize, what: &str) -> Result<f64, ParseError> {
    let text = ascii(field(buf, offset, len, what)?);
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(ParseError::NonNumeric {
            field: what.to_string(),
            offset,
            text,
        }),
    }
}

pub fn parse_header(buf: &[u8]) -> Result<EdfHeader, ParseError> {
    if buf.len() < 256 {
        return Err(ParseError::Truncated {
            offset: buf.len(),
            what: "fixed 256-byte header".into(),
        });
    }
    if buf[0] == 0xFF {
        return Err(ParseError::UnsupportedWidth {
            offset: 0,
            detail: "24-bit BDF samples; only 16-bit EDF is supported".into(),
        });
    }
    let version = ascii(&buf[0..8]);
    if version != "0" {
        return Err(ParseError::Invalid {
            offset: 0,
            detail: format!("version field {version:?}, expected \"0\""),
        });
    }
    let header_bytes = int_field(buf, 184, 8, "header bytes")?;
    let reserved = ascii(&buf[192..236]);
    let record_count = int_field(buf, 236, 8, "number of data records")?;
    let record_duration = float_field(buf, 244, 8, "duration of a data record")?;
    let ns = int_field(buf, 252, 4, "number of signals")?;
    if ns < 1 {
        return Err(ParseError::Invalid {
            offset: 252,
            detail: format!("signal count {ns}"),
        });
    }
    let ns = ns as usize;
    if header_bytes != 256 * (ns as i64 + 1) {
        return Err(ParseError::Invalid {
            offset: 184,
            detail: format!("header size {header_bytes} != 256 * ({ns} + 1)"),
        });
    }
    let need = 256 * (ns + 1);
    if buf.len() < need {
        return Err(ParseError::Truncated {
            offset: buf.len(),
            what: format!("{ns} signal headers ({need} header bytes)"),
        });
    }
    // field-major: start offset of each per-signal field block
    let widths = [16usize, 80, 8, 8, 8, 8, 8, 80, 8, 32];
    let mut starts = [0usize; 10];
    let mut at = 256;
    for (i, w) in widths.iter().enumerate() {
        starts[i] = at;
        at += w * ns;
    }
    let mut signals = Vec::with_capacity(ns);
    for s in 0..ns {
        let at = |f: usize| starts[f] + s * widths[f];
        let samples = int_field(buf, at(8), 8, "samples per record")?;
        if samples < 1 {
            return Err(ParseError::Invalid {
                offset: at(8),
                detail: format!("samples per record {samples}"),
            });
        }
        let sig = EdfSignalHeader {
            label: ascii(&buf[at(0)..at(0) + 16]),
            transducer: ascii(&buf[at(1)..at(1) + 80]),
            physical_dimension: ascii(&buf[at(2)..at(2) + 8]),
            physical_min: float_field(buf, at(3), 8, "physical minimum")?,
            physical_max: float_field(buf, at(4), 8, "physical maximum")?,
            digital_min: int_field(buf, at(5), 8, "digital minimum")?,
            digital_max: int_field(buf, at(6), 8, "digital maximum")?,
            prefiltering: ascii(&buf[at(7)..at(7) + 80]),
            samples_per_record: samples as usize,
        };
        if sig.digital_max <= sig.digital_min {
            return Err(ParseError::Invalid {
                offset: at(5),
                detail: format!(
                    "signal {:?}: digital max {} <= min {}",
                    sig.label, sig.digital_max, sig.digital_min
                ),
            });
        }
        if sig.digital_min < i16::MIN as i64 || sig.digital_max > i16::MAX as i64 {
            return Err(ParseError::UnsupportedWidth {
                offset: at(5),
                detail: format!(
                    "signal {:?}: digital range [{}, {}] exceeds 16 bits",
                    sig.label, sig.digital_min, sig.digital_max
                ),
            });
        }
        signals.push(sig);
    }
    Ok(EdfHeader {
        version,
        patient: ascii(&buf[8..88]),
        recording: ascii(&buf[88..168]),
        start_date: ascii(&buf[168..176]),
        start_time: ascii(&buf[176..184]),
        header_bytes: header_bytes as usize,
        reserved,
        record_count,
        record_duration,
        signal_count: ns,
        signals,
    })
}

/// Decodes the time-stamped annotation lists of one record's annotation bytes.
fn parse_tals(bytes: &[u8], base: usize, out: &mut Vec<Annotation>) -> Result<(), ParseError> {
    for tal in bytes.split(|&b| b == 0) {
        if tal.is_empty() {
            continue;
        }
        let mut parts = tal.split(|&b| b == 0x14);
        let stamp = parts.next().unwrap_or_default();
        let onset_text = match stamp.iter().position(|&b| b == 0x15) {
            Some(i) => &stamp[..i],
            None => stamp,
        };
        let onset_text = String::from_utf8_lossy(onset_text).to_string();
        let onset: f64 = onset_text.trim().parse().map_err(|_| ParseError::NonNumeric {
            field: "annotation onset".into(),
            offset: base,
            text: onset_text.clone(),
        })?;
        for text in parts {
            if text.is_empty() {
                continue;
            }
            out.push(Annotation {
                onset,
                label: String::from_utf8_lossy(text).trim().to_string(),
            });
        }
    }
    Ok(())
}

/// Parses a complete EDF/EDF+ file held in memory.
pub fn parse_edf(buf: &[u8]) -> Result<(EdfHeader, Recording), ParseError> {
    let header = parse_header(buf)?;
    if header.reserved.starts_with("EDF+D") {
        return Err(ParseError::Invalid {
            offset: 192,
            detail: "discontinuous EDF+D recordings are not supported".into(),
        });
    }
    let record_bytes: usize = header.signals.iter().map(|s| 2 * s.samples_per_record).sum();
    let data = &buf[header.header_bytes..];
    let records = if header.record_count < 0 {
        if data.len() % record_bytes != 0 {
            return Err(ParseError::RecordSize {
                offset: header.header_bytes,
                detail: format!(
                    "{} data bytes are not a multiple of the {record_bytes}-byte record",
                    data.len()
                ),
            });
        }
        data.len() / record_bytes
    } else {
        let records = header.record_count as usize;
        if data.len() != records * record_bytes {
            return Err(ParseError::RecordSize {
                offset: header.header_bytes,
                detail: format!(
                    "{records} records of {record_bytes} bytes need {} data bytes, file has {}",
                    records * record_bytes,
                    data.len()
                ),
            });
        }
        records
    };

    let ordinary: Vec<usize> = (0..header.signal_count)
        .filter(|&i| !header.signals[i].is_annotation())
        .collect();
    let per_record = ordinary
        .first()
        .map(|&i| header.signals[i].samples_per_record)
        .unwrap_or(0);
    if let Some(&bad) = ordinary
        .iter()
        .find(|&&i| header.signals[i].samples_per_record != per_record)
    {
        return Err(ParseError::Invalid {
            offset: 256 + header.signal_count * (16 + 80 + 8 * 5 + 80) + bad * 8,
            detail: "signals with different sample rates are not supported".into(),
        });
    }
    if !(header.record_duration > 0.0) && per_record > 0 {
        return Err(ParseError::Invalid {
            offset: 244,
            detail: format!("record duration {}", header.record_duration),
        });
    }

    let mut signals = Array2::<f32>::zeros((ordinary.len(), records * per_record));
    let mut annotations = Vec::new();
    let mut pos = 0usize;
    for r in 0..records {
        let mut row = 0;
        for sig in &header.signals {
            let n = sig.samples_per_record;
            let chunk = &data[pos..pos + 2 * n];
            if sig.is_annotation() {
                parse_tals(chunk, header.header_bytes + pos, &mut annotations)?;
            } else {
                let (gain, offset) = sig.scaling();
                for (j, pair) in chunk.chunks_exact(2).enumerate() {
                    let d = i16::from_le_bytes([pair[0], pair[1]]);
                    signals[[row, r * n + j]] = (gain * d as f64 + offset) as f32;
                }
                row += 1;
            }
            pos += 2 * n;
        }
    }
    let fs = if per_record > 0 {
        per_record as f64 / header.record_duration
    } else {
        1.0
    };
    let recording = Recording {
        channel_labels: ordinary
            .iter()
            .map(|&i| header.signals[i].label.clone())
            .collect(),
        fs,
        signals,
        annotations,
    };
    Ok((header, recording))
}

pub fn read_edf(path: impl AsRef<Path>) -> Result<Recording> {
    let path = path.as_ref();
    let buf = std::fs::read(path)?;
    let (_, rec) = parse_edf(&buf).map_err(|e| e.at(path))?;
    Ok(rec)
}

/// Byte-level EDF writer for building test fixtures.
#[doc(hidden)]
pub mod fixture {
    pub struct Signal {
        pub label: String,
        pub physical: (f64, f64),
        pub digital: (i64, i64),
        pub samples_per_record: usize,
        /// Raw digital samples, `records × samples_per_record` long.
        pub samples: Vec<i16>,
    }

    /// Writes `text` left-aligned into a space-padded field of `width` bytes.
    pub fn pad(text: &str, width: usize) -> Vec<u8> {
        let mut b = text.as_bytes().to_vec();
        b.truncate(width);
        b.resize(width, b' ');
        b
    }

    /// Encodes annotations `(onset, label)` as one TAL block per record, padded to
    /// `2 · samples_per_record` bytes. The first TAL of each record is the time-keeping one.
    pub fn tal_block(record_start: f64, events: &[(f64, &str)], bytes: usize) -> Vec<i16> {
        let mut raw = format!("+{record_start}\x14\x14\x00").into_bytes();
        for (onset, label) in events {
            raw.extend_from_slice(format!("+{onset}\x14{label}\x14\x00").as_bytes());
        }
        assert!(raw.len() <= bytes, "annotation block too small");
        raw.resize(bytes, 0);
        raw.chunks_exact(2)
            .map(|p| i16::from_le_bytes([p[0], p[1]]))
            .collect()
    }

    pub fn build(records: i64, duration: f64, signals: &[Signal], reserved: &str) -> Vec<u8> {
        let ns = signals.len();
        let mut out = Vec::new();
        out.extend(pad("0", 8));
        out.extend(pad("X X X X", 80));
        out.extend(pad("Startdate X X X X", 80));
        out.extend(pad("01.01.09", 8));
        out.extend(pad("12.00.00", 8));
        out.extend(pad(&(256 * (ns + 1)).to_string(), 8));
        out.extend(pad(reserved, 44));
        out.extend(pad(&records.to_string(), 8));
        out.extend(pad(&duration.to_string(), 8));
        out.extend(pad(&ns.to_string(), 4));
        for s in signals {
            out.extend(pad(&s.label, 16));
        }
        for _ in signals {
            out.extend(pad("AgAgCl electrode", 80));
        }
        for s in signals {
            out.extend(pad(if s.label == super::ANNOTATION_LABEL { "" } else { "uV" }, 8));
        }
        for s in signals {
            out.extend(pad(&s.physical.0.to_string(), 8));
        }
        for s in signals {
            out.extend(pad(&s.physical.1.to_string(), 8));
        }
        for s in signals {
            out.extend(pad(&s.digital.0.to_string(), 8));
        }
        for s in signals {
            out.extend(pad(&s.digital.1.to_string(), 8));
        }
        for _ in signals {
            out.extend(pad("HP:0.1Hz", 80));
        }
        for s in signals {
            out.extend(pad(&s.samples_per_record.to_string(), 8));
        }
        for _ in signals {
            out.extend(pad("", 32));
        }
        let records = records.max(0) as usize;
        for r in 0..records {
            for s in signals {
                let n = s.samples_per_record;
                for v in &s.samples[r * n..(r + 1) * n] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }
}
