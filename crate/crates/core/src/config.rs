//! Run configuration file: one flat TOML document holding the model, loss weights,
//! optimizer, split and ingest settings. Every key is optional; missing keys fall back
//! to the chosen `preset`. Unknown keys are rejected.
//!
//! ```toml
//! preset = "physionet"          # physionet | bci-iv-2a | desk | miniature
//! channels = 64
//! window_len = 400
//! step = 20
//! upsample_rows = 4
//! classes = 2
//! columns = [
//!   { conv_filters = 64, conv_kernel = 50, pool = 80, dropout = 0.5, lstm_units = 64,
//!     lstm_dropout = 0.4, dec_lstm_units = 100, dec_lstm_dropout = 0.2, dec_rows = 2,
//!     dec_cols = 50, dec_filters = 64 },
//! ]
//! beta = [0.2, 0.1, 0.2]
//! eta = [0.1, 0.1, 0.1]
//! gamma = 0.3
//! epochs = 250
//! learning_rate = 1e-5
//! split = "random:10"           # kfold[:reps] | random:N | random-disjoint:N | loso
//! folds = 10
//! label_fraction = 1.0
//! exclude_subjects = ["S088", "S089", "S092", "S100"]
//! event_map = { T1 = 0, T2 = 1 }
//! epoch_duration_s = 3.1
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{validate_config, ColumnSpec, LossWeights, ModelConfig, SplitKind};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Physionet,
    #[serde(rename = "bci-iv-2a")]
    BciIv2a,
    Desk,
    Miniature,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "physionet" => Ok(Preset::Physionet),
            "bci-iv-2a" => Ok(Preset::BciIv2a),
            "desk" => Ok(Preset::Desk),
            "miniature" => Ok(Preset::Miniature),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// The file as written: every key optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,

    pub channels: Option<usize>,
    pub window_len: Option<usize>,
    pub step: Option<usize>,
    pub upsample_rows: Option<usize>,
    pub classes: Option<usize>,
    pub columns: Option<Vec<ColumnSpec>>,
    pub fc_hidden: Option<usize>,
    pub l2_factor: Option<f64>,
    pub bn_momentum: Option<f64>,
    pub bn_eps: Option<f64>,
    pub use_cnn: Option<bool>,
    pub use_lstm: Option<bool>,
    pub use_attention: Option<bool>,

    pub beta: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub ds_normalize: Option<bool>,
    /// `0` uses every pair.
    pub ds_pair_budget: Option<usize>,

    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub eval_batch_size: Option<usize>,
    pub val_fraction: Option<f64>,
    pub center_alpha: Option<f64>,
    pub min_labeled_per_batch: Option<usize>,
    pub semi_supervised: Option<bool>,
    pub grid_values: Option<Vec<f64>>,
    pub grid_full_factorial: Option<bool>,
    /// `0` means no cap.
    pub grid_cap: Option<usize>,

    pub split: Option<String>,
    pub folds: Option<usize>,
    pub label_fraction: Option<f64>,
    pub exclude_subjects: Option<Vec<String>>,

    pub event_map: Option<BTreeMap<String, usize>>,
    pub epoch_duration_s: Option<f64>,
    pub epoch_offset_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSettings {
    pub kind: SplitKind,
    /// Fold count (k-fold, LOSO) or repetition count (random draws).
    pub folds: usize,
    pub label_fraction: f64,
    pub exclude: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSettings {
    pub event_map: BTreeMap<String, usize>,
    pub duration_s: f64,
    pub offset_s: f64,
}

/// Fully resolved settings of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSettings,
    pub ingest: IngestSettings,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (model, split, ingest) = match p {
            Preset::Physionet => (
                ModelConfig::physionet(),
                SplitSettings {
                    kind: SplitKind::RandomSubjects {
                        test_size: 10,
                        disjoint: false,
                    },
                    folds: 10,
                    label_fraction: 1.0,
                    exclude: ["S088", "S089", "S092", "S100"].map(String::from).to_vec(),
                },
                IngestSettings {
                    event_map: [("T1".to_string(), 0), ("T2".to_string(), 1)].into(),
                    duration_s: 3.1,
                    offset_s: 0.0,
                },
            ),
            Preset::BciIv2a => (
                ModelConfig::bci_iv_2a(),
                SplitSettings {
                    kind: SplitKind::Loso,
                    folds: 0,
                    label_fraction: 1.0,
                    exclude: Vec::new(),
                },
                IngestSettings {
                    event_map: [("769", 0), ("770", 1), ("771", 2), ("772", 3)]
                        .map(|(k, v)| (k.to_string(), v))
                        .into(),
                    duration_s: 4.0,
                    offset_s: 0.0,
                },
            ),
            Preset::Desk | Preset::Miniature => (
                if p == Preset::Desk {
                    ModelConfig::desk()
                } else {
                    ModelConfig::miniature()
                },
                SplitSettings {
                    kind: SplitKind::KfoldSubjects { repetitions: 1 },
                    folds: 3,
                    label_fraction: 1.0,
                    exclude: Vec::new(),
                },
                IngestSettings {
                    event_map: [("T1".to_string(), 0), ("T2".to_string(), 1)].into(),
                    duration_s: 1.0,
                    offset_s: 0.0,
                },
            ),
        };
        let train = match p {
            Preset::Physionet | Preset::BciIv2a => TrainConfig::paper(),
            Preset::Desk | Preset::Miniature => TrainConfig::desk(model.columns.len()),
        };
        RunConfig {
            preset: p,
            model,
            train,
            split,
            ingest,
        }
    }

    pub fn from_file(file: &ConfigFile) -> Result<Self> {
        let mut rc = RunConfig::preset(file.preset.unwrap_or(Preset::Physionet));
        let m = &mut rc.model;
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(file.channels => m.channel_count);
        set!(file.window_len => m.window_len);
        set!(file.step => m.step);
        set!(file.upsample_rows => m.upsample_rows);
        set!(file.classes => m.class_count);
        set!(file.fc_hidden => m.fc_hidden);
        set!(file.l2_factor => m.l2_factor);
        set!(file.bn_momentum => m.bn_momentum);
        set!(file.bn_eps => m.bn_eps);
        set!(file.use_cnn => m.backbone.cnn);
        set!(file.use_lstm => m.backbone.lstm);
        set!(file.use_attention => m.backbone.attention);
        if let Some(cols) = &file.columns {
            m.columns = cols.clone();
            // per-column weights default to the uniform desk values when the column count changes
            if rc.train.weights.beta.len() != cols.len() {
                rc.train.weights = LossWeights::uniform(cols.len(), 0.2, 0.1, rc.train.weights.gamma);
            }
        }
        let t = &mut rc.train;
        set!(file.seed => t.seed);
        set!(file.beta => t.weights.beta);
        set!(file.eta => t.weights.eta);
        set!(file.gamma => t.weights.gamma);
        set!(file.ds_normalize => t.ds.normalize);
        if let Some(b) = file.ds_pair_budget {
            t.ds.pair_budget = (b > 0).then_some(b);
        }
        set!(file.epochs => t.epochs);
        set!(file.learning_rate => t.learning_rate);
        set!(file.batch_size => t.batch_size);
        set!(file.eval_batch_size => t.eval_batch_size);
        set!(file.val_fraction => t.val_fraction);
        set!(file.center_alpha => t.center_alpha);
        set!(file.min_labeled_per_batch => t.min_labeled_per_batch);
        set!(file.semi_supervised => t.semi_supervised);
        set!(file.grid_values => t.grid.values);
        set!(file.grid_full_factorial => t.grid.full_factorial);
        if let Some(c) = file.grid_cap {
            t.grid.cap = (c > 0).then_some(c);
        }
        if let Some(s) = &file.split {
            rc.split.kind = s.parse()?;
        }
        set!(file.folds => rc.split.folds);
        set!(file.label_fraction => rc.split.label_fraction);
        set!(file.exclude_subjects => rc.split.exclude);
        set!(file.event_map => rc.ingest.event_map);
        set!(file.epoch_duration_s => rc.ingest.duration_s);
        set!(file.epoch_offset_s => rc.ingest.offset_s);
        Ok(rc)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        RunConfig::from_file(&file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every rule the resolved settings break, as printable lines.
    pub fn violations(&self) -> Vec<String> {
        let mut out: Vec<String> = validate_config(&self.model).iter().map(ToString::to_string).collect();
        out.extend(
            self.train
                .weights
                .validate(self.model.columns.len())
                .iter()
                .map(ToString::to_string),
        );
        if let Err(e) = self.train.validate() {
            out.push(e.to_string());
        }
        let f = self.split.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            out.push(format!("label_fraction: {f} outside (0, 1]"));
        }
        if let Some(bad) = self.ingest.event_map.iter().find(|(_, &c)| c >= self.model.class_count) {
            out.push(format!("event_map: {} maps to class {} >= {}", bad.0, bad.1, self.model.class_count));
        }
        if !(self.ingest.duration_s > 0.0) {
            out.push("epoch_duration_s: must be > 0".into());
        }
        out
    }

    /// The same settings written back out with every key present.
    pub fn to_file(&self) -> ConfigFile {
        let m = &self.model;
        let t = &self.train;
        ConfigFile {
            preset: Some(self.preset),
            seed: Some(t.seed),
            channels: Some(m.channel_count),
            window_len: Some(m.window_len),
            step: Some(m.step),
            upsample_rows: Some(m.upsample_rows),
            classes: Some(m.class_count),
            columns: Some(m.columns.clone()),
            fc_hidden: Some(m.fc_hidden),
            l2_factor: Some(m.l2_factor),
            bn_momentum: Some(m.bn_momentum),
            bn_eps: Some(m.bn_eps),
            use_cnn: Some(m.backbone.cnn),
            use_lstm: Some(m.backbone.lstm),
            use_attention: Some(m.backbone.attention),
            beta: Some(t.weights.beta.clone()),
            eta: Some(t.weights.eta.clone()),
            gamma: Some(t.weights.gamma),
            ds_normalize: Some(t.ds.normalize),
            ds_pair_budget: Some(t.ds.pair_budget.unwrap_or(0)),
            epochs: Some(t.epochs),
            learning_rate: Some(t.learning_rate),
            batch_size: Some(t.batch_size),
            eval_batch_size: Some(t.eval_batch_size),
            val_fraction: Some(t.val_fraction),
            center_alpha: Some(t.center_alpha),
            min_labeled_per_batch: Some(t.min_labeled_per_batch),
            semi_supervised: Some(t.semi_supervised),
            grid_values: Some(t.grid.values.clone()),
            grid_full_factorial: Some(t.grid.full_factorial),
            grid_cap: Some(t.grid.cap.unwrap_or(0)),
            split: Some(self.split.kind.to_string()),
            folds: Some(self.split.folds),
            label_fraction: Some(self.split.label_fraction),
            exclude_subjects: Some(self.split.exclude.clone()),
            event_map: Some(self.ingest.event_map.clone()),
            epoch_duration_s: Some(self.ingest.duration_s),
            epoch_offset_s: Some(self.ingest.offset_s),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_file()).map_err(|e| Error::Config(e.to_string()))
    }
}
