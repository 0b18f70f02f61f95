//! Sliding-window slicing of trials into `C × m` temporal fragments.

use ndarray::{s, Array4};

use crate::data::{Trial, WindowSequence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of full windows of length `m` taken every `p` samples from `t` samples.
pub fn window_count(t: usize, m: usize, p: usize) -> usize {
    if m == 0 || p == 0 || m > t {
        0
    } else {
        (t - m) / p + 1
    }
}

/// Slices a trial into `floor((T - m) / p) + 1` windows starting at `0, p, 2p, …`.
/// Samples past the last full window are dropped. Windows are views into the trial.
pub fn slice_trial<S: Scalar>(trial: &Trial<S>, m: usize, p: usize) -> Result<WindowSequence<'_, S>> {
    let t = trial.samples();
    if m == 0 || p == 0 {
        return Err(Error::InvalidArgument(format!(
            "window length and step must be >= 1 (m={m}, p={p})"
        )));
    }
    if m > t {
        return Err(Error::InvalidArgument(format!(
            "window length {m} exceeds trial length {t}"
        )));
    }
    let windows = (0..window_count(t, m, p))
        .map(|i| trial.data.slice(s![.., i * p..i * p + m]))
        .collect();
    Ok(WindowSequence {
        windows,
        source_trial_id: trial.trial_id.clone(),
        window_len: m,
        step: p,
    })
}

/// Stacks the windows of several equally shaped trials into a `(B, n, C, m)` tensor.
pub fn stack_windows<S: Scalar>(trials: &[&Trial<S>], m: usize, p: usize) -> Result<Array4<S>> {
    let first = trials
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (c, t) = first.data.dim();
    let n = window_count(t, m, p);
    let mut out = Array4::zeros((trials.len(), n, c, m));
    for (b, trial) in trials.iter().enumerate() {
        if trial.data.dim() != (c, t) {
            return Err(Error::Shape(format!(
                "trial {} is {:?}, batch expects {:?}",
                trial.trial_id,
                trial.data.dim(),
                (c, t)
            )));
        }
        let seq = slice_trial(trial, m, p)?;
        for (i, w) in seq.windows.iter().enumerate() {
            out.slice_mut(s![b, i, .., ..]).assign(w);
        }
    }
    Ok(out)
}
