use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// One ablation setting, applied on top of a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// Uniform weights over windows instead of learned attention.
    DisableAttention,
    /// Window features go straight to pooling, no recurrence.
    DisableLstm,
    /// Flattened raw windows replace the convolutional stage.
    DisableCnn,
    /// Keep only column `k` (0-based).
    SingleColumn(usize),
    DisableCenterLoss,
    DisableDsLoss,
    /// `β = η = 0`: only the supervised terms and the L2 penalty remain.
    DisableUnsupervised,
}

impl Variant {
    pub fn apply(&self, model: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelConfig, TrainConfig)> {
        let mut m = model.clone();
        let mut c = cfg.clone();
        match *self {
            Variant::Full => {}
            Variant::DisableAttention => m.backbone.attention = false,
            Variant::DisableLstm => m.backbone.lstm = false,
            Variant::DisableCnn => m.backbone.cnn = false,
            Variant::SingleColumn(k) => {
                m = model
                    .single_column(k)
                    .ok_or_else(|| Error::InvalidArgument(format!("no column {k} in a {}-column model", model.columns.len())))?;
                let pick = |v: &[f64]| v.get(k).copied().unwrap_or(0.0);
                c.weights = LossWeights {
                    beta: vec![pick(&cfg.weights.beta)],
                    eta: vec![pick(&cfg.weights.eta)],
                    gamma: cfg.weights.gamma,
                };
            }
            Variant::DisableCenterLoss => c.weights.gamma = 0.0,
            Variant::DisableDsLoss => c.weights.eta.iter_mut().for_each(|e| *e = 0.0),
            Variant::DisableUnsupervised => {
                c.weights.beta.iter_mut().for_each(|b| *b = 0.0);
                c.weights.eta.iter_mut().for_each(|e| *e = 0.0);
            }
        }
        Ok((m, c))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::DisableAttention => f.write_str("disable-attention"),
            Variant::DisableLstm => f.write_str("disable-lstm"),
            Variant::DisableCnn => f.write_str("disable-cnn"),
            Variant::SingleColumn(k) => write!(f, "single-column:{k}"),
            Variant::DisableCenterLoss => f.write_str("disable-center-loss"),
            Variant::DisableDsLoss => f.write_str("disable-ds-loss"),
            Variant::DisableUnsupervised => f.write_str("disable-unsupervised"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "disable-attention" => Variant::DisableAttention,
            "disable-lstm" => Variant::DisableLstm,
            "disable-cnn" => Variant::DisableCnn,
            "disable-center-loss" => Variant::DisableCenterLoss,
            "disable-ds-loss" => Variant::DisableDsLoss,
            "disable-unsupervised" => Variant::DisableUnsupervised,
            other => match other.strip_prefix("single-column:") {
                Some(k) => Variant::SingleColumn(
                    k.parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad column index in {other:?}")))?,
                ),
                None => return Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
            },
        })
    }
}
