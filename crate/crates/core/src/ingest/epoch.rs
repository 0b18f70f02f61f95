use std::collections::BTreeMap;

use ndarray::s;

use super::Recording;
use crate::data::Trial;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct EpochOptions {
    pub duration_s: f64,
    /// Shift of the trial start relative to the cue onset, in seconds.
    pub offset_s: f64,
    pub subject_id: String,
    pub session: String,
    pub class_count: usize,
}

impl EpochOptions {
    pub fn new(subject_id: impl Into<String>, duration_s: f64, class_count: usize) -> Self {
        EpochOptions {
            duration_s,
            offset_s: 0.0,
            subject_id: subject_id.into(),
            session: "0".into(),
            class_count,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Epoched {
    pub trials: Vec<Trial<f32>>,
    /// Matching annotations whose extent fell outside the recording.
    pub dropped: usize,
}

/// Cuts one trial of `round(duration_s · fs)` samples per annotation whose label appears
/// in `event_labels`, starting at the annotation onset (plus the configured offset).
pub fn epoch(
    rec: &Recording,
    event_labels: &BTreeMap<String, usize>,
    opts: &EpochOptions,
) -> Result<Epoched> {
    let t = (opts.duration_s * rec.fs).round();
    if !(t >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "duration {} s at {} Hz is shorter than one sample",
            opts.duration_s, rec.fs
        )));
    }
    let t = t as usize;
    let mut trials = Vec::new();
    let mut dropped = 0;
    for (index, ann) in rec.annotations.iter().enumerate() {
        let Some(&class) = event_labels.get(&ann.label) else {
            continue;
        };
        let start = ((ann.onset + opts.offset_s) * rec.fs).round();
        if start < 0.0 || start as usize + t > rec.len() {
            dropped += 1;
            continue;
        }
        let start = start as usize;
        let data = rec.signals.slice(s![.., start..start + t]).to_owned();
        trials.push(Trial::new(
            opts.subject_id.clone(),
            format!("{}/{}/{index}", opts.subject_id, opts.session),
            data,
            Some(class),
            opts.class_count,
        )?);
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} trial(s) extending past the recording",
            opts.subject_id
        );
    }
    Ok(Epoched { trials, dropped })
}
