use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use ndarray::Array2;
use proptest::prelude::*;
use serde_json::Value;

use cstae::ingest::{
    epoch, parse_edf, read_array_bytes, read_dataset_bytes, synth_generate, write_array_bytes, write_dataset_bytes,
    Annotation, EpochOptions, Recording, SynthSpec,
};
use cstae::ParseError;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/edf")
}

fn oracle() -> BTreeMap<String, Value> {
    serde_json::from_str(&fs::read_to_string(dir().join("oracle.json")).unwrap()).unwrap()
}

fn f64_from_hex(hex: &str) -> f64 {
    f64::from_bits(u64::from_str_radix(hex, 16).unwrap())
}

fn kind(e: &ParseError) -> &'static str {
    match e {
        ParseError::Truncated { .. } => "Truncated",
        ParseError::NonNumeric { .. } => "NonNumeric",
        ParseError::RecordSize { .. } => "RecordSize",
        ParseError::UnsupportedWidth { .. } => "UnsupportedWidth",
        ParseError::BadMagic { .. } => "BadMagic",
        ParseError::Version(_) => "Version",
        ParseError::BadChannelCount { .. } => "BadChannelCount",
        ParseError::SizeMismatch { .. } => "SizeMismatch",
        ParseError::Invalid { .. } => "Invalid",
    }
}

#[test]
fn edf_corpus_matches_hex_oracle() {
    let oracle = oracle();
    let mut checked = 0;
    for (name, expect) in &oracle {
        let bytes = fs::read(dir().join(name)).unwrap();
        let Some(ok) = expect.get("ok") else { continue };
        let (hdr, rec) = parse_edf(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(hdr.version, ok["version"].as_str().unwrap(), "{name}");
        assert_eq!(hdr.patient, ok["patient"].as_str().unwrap(), "{name}");
        assert_eq!(hdr.recording, ok["recording"].as_str().unwrap(), "{name}");
        assert_eq!(hdr.start_date, ok["start_date"].as_str().unwrap(), "{name}");
        assert_eq!(hdr.start_time, ok["start_time"].as_str().unwrap(), "{name}");
        assert_eq!(hdr.reserved, ok["reserved"].as_str().unwrap(), "{name}");
        assert_eq!(hdr.header_bytes as u64, ok["header_bytes"].as_u64().unwrap(), "{name}");
        assert_eq!(hdr.record_count, ok["record_count"].as_i64().unwrap(), "{name}");
        assert_eq!(hdr.record_duration, ok["record_duration"].as_f64().unwrap(), "{name}");
        assert_eq!(hdr.signal_count as u64, ok["signal_count"].as_u64().unwrap(), "{name}");

        for (sig, want) in hdr.signals.iter().zip(ok["signals"].as_array().unwrap()) {
            assert_eq!(sig.label, want["label"].as_str().unwrap(), "{name}");
            assert_eq!(sig.physical_min, want["physical_min"].as_f64().unwrap());
            assert_eq!(sig.physical_max, want["physical_max"].as_f64().unwrap());
            assert_eq!(sig.digital_min, want["digital_min"].as_i64().unwrap());
            assert_eq!(sig.digital_max, want["digital_max"].as_i64().unwrap());
            assert_eq!(sig.samples_per_record as u64, want["samples_per_record"].as_u64().unwrap());
            let (gain, offset) = sig.scaling();
            assert_eq!(gain.to_bits(), f64_from_hex(want["gain_hex"].as_str().unwrap()).to_bits(), "{name} {}", sig.label);
            assert_eq!(offset.to_bits(), f64_from_hex(want["offset_hex"].as_str().unwrap()).to_bits(), "{name} {}", sig.label);
        }

        let labels: Vec<&str> = ok["channel_labels"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        assert_eq!(rec.channel_labels, labels, "{name}");
        assert_eq!(rec.fs, ok["fs"].as_f64().unwrap(), "{name}");
        assert_eq!(rec.len() as u64, ok["samples"].as_u64().unwrap(), "{name}");
        for (row, hex) in rec.signals.rows().into_iter().zip(ok["samples_hex"].as_array().unwrap()) {
            let got: String = row.iter().map(|v| format!("{:08x}", v.to_bits())).collect();
            assert_eq!(got, hex.as_str().unwrap(), "{name}");
        }
        let anns: Vec<(f64, String)> = ok["annotations"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| (a[0].as_f64().unwrap(), a[1].as_str().unwrap().to_string()))
            .collect();
        let got: Vec<(f64, String)> = rec.annotations.iter().map(|a| (a.onset, a.label.clone())).collect();
        assert_eq!(got, anns, "{name}");
        checked += 1;
    }
    assert_eq!(checked, 4);
}

#[test]
fn malformed_fixtures_fail_with_kind_and_offset() {
    let mut checked = 0;
    for (name, expect) in oracle() {
        let Some(err) = expect.get("error") else { continue };
        let bytes = fs::read(dir().join(&name)).unwrap();
        let e = parse_edf(&bytes).expect_err(&name);
        assert_eq!(kind(&e), err["kind"].as_str().unwrap(), "{name}: {e}");
        assert_eq!(e.offset() as u64, err["offset"].as_u64().unwrap(), "{name}: {e}");
        checked += 1;
    }
    assert_eq!(checked, 5);
}

#[test]
fn every_prefix_of_a_valid_file_is_rejected_without_panic() {
    let bytes = fs::read(dir().join("edfplus_events.edf")).unwrap();
    for cut in 0..bytes.len() {
        assert!(parse_edf(&bytes[..cut]).is_err(), "prefix {cut}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]
    #[test]
    fn corrupted_headers_never_panic(pos in 0usize..1024, byte in any::<u8>()) {
        let mut bytes = fs::read(dir().join("edfplus_events.edf")).unwrap();
        bytes[pos] = byte;
        let _ = parse_edf(&bytes);
    }

    #[test]
    fn array_format_round_trips(
        c in 1usize..5,
        l in 0usize..40,
        fs_hz in 1.0f64..1000.0,
        seed in any::<u64>(),
        n_ann in 0usize..4,
    ) {
        let signals = Array2::from_shape_fn((c, l), |(i, j)| {
            let x = seed.wrapping_mul(31).wrapping_add((i * 977 + j) as u64);
            f32::from_bits((x % 0x7f00_0000) as u32) * if x % 2 == 0 { 1.0 } else { -1.0 }
        });
        let annotations = (0..n_ann)
            .map(|i| Annotation { onset: (l as f64 / fs_hz) * i as f64 / n_ann as f64, label: format!("T{i}") })
            .collect();
        let labels = (0..c).map(|i| format!("ch{i}")).collect();
        let rec = Recording::new(labels, fs_hz, signals, annotations).unwrap();
        let bytes = write_array_bytes(&rec);
        let back = read_array_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &rec);
        for cut in [0, 3, 4, 5, bytes.len() / 2, bytes.len().saturating_sub(1)] {
            if cut < bytes.len() {
                prop_assert!(read_array_bytes(&bytes[..cut]).is_err());
            }
        }
    }
}

#[test]
fn dataset_container_round_trips() {
    let (trials, _) = synth_generate(&SynthSpec::new(3, 5, 4, 30, 3).with_seed(8)).unwrap();
    let bytes = write_dataset_bytes(&trials);
    assert_eq!(read_dataset_bytes(&bytes).unwrap(), trials);
    assert!(read_dataset_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_dataset_bytes(&bad), Err(ParseError::BadMagic { .. })));
}

#[test]
fn epoching_counts_in_range_events() {
    let bytes = fs::read(dir().join("edfplus_events.edf")).unwrap();
    let (_, rec) = parse_edf(&bytes).unwrap();
    let map: BTreeMap<String, usize> = [("T0", 0), ("T1", 1), ("T2", 2)].map(|(k, v)| (k.to_string(), v)).into();
    for duration in [0.05, 0.25, 0.5, 1.0, 2.0] {
        let t = (duration * rec.fs).round() as usize;
        let expected = rec
            .annotations
            .iter()
            .filter(|a| ((a.onset * rec.fs).round() as usize) + t <= rec.len())
            .count();
        let out = epoch(&rec, &map, &EpochOptions::new("S001", duration, 3)).unwrap();
        assert_eq!(out.trials.len(), expected, "duration {duration}");
        assert_eq!(out.dropped, rec.annotations.len() - expected);
        for tr in &out.trials {
            assert_eq!(tr.data.dim(), (2, t));
        }
    }
    // the T1 trial is the signal starting at sample 10
    let out = epoch(&rec, &map, &EpochOptions::new("S001", 0.5, 3)).unwrap();
    let t1 = out.trials.iter().find(|t| t.label == Some(1)).unwrap();
    assert_eq!(t1.data.row(0).to_vec(), rec.signals.row(0).slice(ndarray::s![10..20]).to_vec());
}

#[test]
fn synthetic_classes_are_nearest_centroid_separable_without_noise() {
    let spec = SynthSpec::new(3, 20, 6, 64, 2).with_snr(f64::INFINITY).with_seed(5);
    let (trials, _) = synth_generate(&spec).unwrap();
    // independent oracle: per-subject class means of the flattened trial, nearest by Euclidean distance
    let mut correct = 0;
    for subject in ["S001", "S002", "S003"] {
        let own: Vec<_> = trials.iter().filter(|t| t.subject_id == subject).collect();
        let centroid = |k: usize| -> Vec<f64> {
            let members: Vec<_> = own.iter().filter(|t| t.label == Some(k)).collect();
            let mut acc = vec![0.0; members[0].data.len()];
            for m in &members {
                for (a, v) in acc.iter_mut().zip(m.data.iter()) {
                    *a += f64::from(*v) / members.len() as f64;
                }
            }
            acc
        };
        let cents = [centroid(0), centroid(1)];
        for t in &own {
            let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(t.data.iter()).map(|(a, b)| (a - f64::from(*b)).powi(2)).sum() };
            let pred = if dist(&cents[0]) <= dist(&cents[1]) { 0 } else { 1 };
            correct += usize::from(Some(pred) == t.label);
        }
    }
    assert_eq!(correct, trials.len());
}
