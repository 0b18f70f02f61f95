//! Domain types shared across the crate: trials, window sequences, model and loss
//! configuration, subject split plans and label masks.

mod config;
mod mask;
mod split;

pub use config::{validate_config, Backbone, ColumnSpec, LossWeights, ModelConfig, Violation, UPSAMPLE_COLS};
pub use mask::{apply_label_mask, LabelMask};
pub use split::{make_split_plan, make_split_plan_with, Fold, SplitKind, SplitOptions, SplitPlan};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One epoched motor-imagery trial: a `C × T` matrix in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial<S> {
    pub subject_id: String,
    /// `subject/session/index`
    pub trial_id: String,
    pub data: Array2<S>,
    pub label: Option<usize>,
    pub class_count: usize,
}

impl<S: Scalar> Trial<S> {
    pub fn new(
        subject_id: impl Into<String>,
        trial_id: impl Into<String>,
        data: Array2<S>,
        label: Option<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let trial = Trial {
            subject_id: subject_id.into(),
            trial_id: trial_id.into(),
            data,
            label,
            class_count,
        };
        trial.check()?;
        Ok(trial)
    }

    pub fn check(&self) -> Result<()> {
        let (c, t) = self.data.dim();
        if c == 0 || t == 0 {
            return Err(Error::Shape(format!(
                "trial {} has empty data {c}x{t}",
                self.trial_id
            )));
        }
        if self.class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "trial {}: class_count must be at least 2",
                self.trial_id
            )));
        }
        if let Some(y) = self.label {
            if y >= self.class_count {
                return Err(Error::InvalidArgument(format!(
                    "trial {}: label {y} out of range for {} classes",
                    self.trial_id, self.class_count
                )));
            }
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "trial {} contains non-finite samples",
                self.trial_id
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn cast<T: Scalar>(&self) -> Trial<T> {
        Trial {
            subject_id: self.subject_id.clone(),
            trial_id: self.trial_id.clone(),
            data: self.data.mapv(|v| T::lit(v.to_f64_lossy())),
            label: self.label,
            class_count: self.class_count,
        }
    }
}

/// The `n` temporal slices of one trial, each `C × m`, taken every `p` samples.
#[derive(Clone, Debug)]
pub struct WindowSequence<'a, S> {
    pub windows: Vec<ArrayView2<'a, S>>,
    pub source_trial_id: String,
    pub window_len: usize,
    pub step: usize,
}

impl<S> WindowSequence<'_, S> {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Sorted, de-duplicated subject ids of a trial set.
pub fn subjects_of<S>(trials: &[Trial<S>]) -> Vec<String> {
    let mut subjects: Vec<String> = trials.iter().map(|t| t.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    subjects
}
