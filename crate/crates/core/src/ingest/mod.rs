//! Getting EEG into the crate: EDF/EDF+ recordings, the `EEGA` array format, epoching
//! continuous recordings into trials, the canonical dataset container and synthetic data.

mod array;
pub(crate) mod bytes;
mod dataset;
mod edf;
mod epoch;
mod synth;

pub use array::{read_array_file, read_array_bytes, write_array_bytes, write_array_file, ARRAY_MAGIC};
pub use dataset::{read_dataset, read_dataset_bytes, write_dataset, write_dataset_bytes, DATASET_MAGIC};
pub use edf::{parse_edf, read_edf, EdfHeader, EdfSignalHeader};
#[doc(hidden)]
pub use edf::fixture as edf_fixture;
pub use epoch::{epoch, EpochOptions, Epoched};
pub use synth::{synth_generate, SynthSpec, SynthTruth};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// Seconds from the start of the recording.
    pub onset: f64,
    pub label: String,
}

/// A continuous multichannel recording, `C × L` samples in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub channel_labels: Vec<String>,
    pub fs: f64,
    pub signals: Array2<f32>,
    pub annotations: Vec<Annotation>,
}

impl Recording {
    pub fn new(
        channel_labels: Vec<String>,
        fs: f64,
        signals: Array2<f32>,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        let rec = Recording {
            channel_labels,
            fs,
            signals,
            annotations,
        };
        rec.check()?;
        Ok(rec)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::InvalidArgument(format!("sampling rate {} must be > 0", self.fs)));
        }
        if self.channel_labels.len() != self.signals.nrows() {
            return Err(Error::Shape(format!(
                "{} channel labels for {} signal rows",
                self.channel_labels.len(),
                self.signals.nrows()
            )));
        }
        let end = self.duration();
        if let Some(a) = self
            .annotations
            .iter()
            .find(|a| !(a.onset >= 0.0 && a.onset <= end))
        {
            return Err(Error::InvalidArgument(format!(
                "annotation {:?} at {} s lies outside [0, {end}]",
                a.label, a.onset
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.signals.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.ncols() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fs
    }
}
