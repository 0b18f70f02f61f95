//! Semi-supervised optimization: mixed labeled/unlabeled minibatches, Adam, validation
//! based model selection, hyperparameter grid search and gradient checking.

mod adam;
mod batch;
mod grid;
mod gradcheck;

pub use adam::Adam;
pub use batch::{epoch_batches, Batch};
pub use grid::{grid_search, GridResult, GridRow, GridSpec};
pub use gradcheck::{
    grad_check, grad_check_linear_toy, probe_trials, relative_error, GradCheckOptions, GradCheckReport,
    LossSelector, TensorCheck,
};

use std::collections::BTreeSet;
use std::time::Instant;

use log::{debug, info};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{apply_label_mask, LabelMask, LossWeights, ModelConfig, Trial};
use crate::error::{Error, Result};
use crate::losses::{total_loss, update_centers, DsOptions, LossBreakdown, LossInputs, LossSettings};
use crate::model::{Mode, Network};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of the labeled trials held out for model selection.
    pub val_fraction: f64,
    pub seed: u64,
    pub center_alpha: f64,
    /// Deal labeled trials evenly over batches when nonzero.
    pub min_labeled_per_batch: usize,
    /// `false` trains on the labeled trials alone with the unsupervised terms switched off.
    pub semi_supervised: bool,
    pub weights: LossWeights,
    pub ds: DsOptions,
    pub grid: GridSpec,
    /// Also measure accuracy on the training trials after every epoch.
    pub track_train_accuracy: bool,
    pub eval_batch_size: usize,
}

impl TrainConfig {
    /// Published settings: 250 epochs at a learning rate of 1e-5, 10% validation.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 250,
            learning_rate: 1e-5,
            batch_size: 32,
            val_fraction: 0.10,
            seed: 0,
            center_alpha: 0.5,
            min_labeled_per_batch: 0,
            semi_supervised: true,
            weights: LossWeights::published(),
            ds: DsOptions::default(),
            grid: GridSpec::default(),
            track_train_accuracy: false,
            eval_batch_size: 64,
        }
    }

    /// Short, fast schedule for the small desk configuration.
    pub fn desk(columns: usize) -> Self {
        TrainConfig {
            epochs: 60,
            learning_rate: 3e-3,
            batch_size: 16,
            weights: LossWeights::uniform(columns, 0.2, 0.1, 0.3),
            ..TrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if !(self.center_alpha > 0.0 && self.center_alpha <= 1.0) {
            return fail(format!("center_alpha {} outside (0, 1]", self.center_alpha));
        }
        Ok(())
    }

    /// Loss settings actually used, after the supervised-only switch.
    pub fn loss_settings(&self, model: &ModelConfig) -> LossSettings {
        let mut weights = self.weights.clone();
        if !self.semi_supervised {
            weights.beta.iter_mut().for_each(|b| *b = 0.0);
            weights.eta.iter_mut().for_each(|e| *e = 0.0);
        }
        LossSettings {
            weights,
            l2_factor: model.l2_factor,
            ds: self.ds.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_accuracy: f64,
    pub train_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected model; ties go to the later epoch.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl TrainHistory {
    /// One row per epoch: the loss terms, validation accuracy and wall time.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch"];
        header.extend(LossBreakdown::FIELDS);
        header.extend(["labeled", "val_accuracy", "train_accuracy", "seconds"]);
        w.write_record(&header)?;
        for r in &self.epochs {
            let mut row = vec![r.epoch.to_string()];
            row.extend(r.loss.values().iter().map(|v| v.to_string()));
            row.push(r.loss.labeled.to_string());
            row.push(r.val_accuracy.to_string());
            row.push(r.train_accuracy.map(|a| a.to_string()).unwrap_or_default());
            row.push(format!("{:.3}", r.seconds));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub struct TrainOutcome<S> {
    /// Parameters from the epoch with the highest validation accuracy.
    pub best: Network<S>,
    /// Parameters after the last epoch.
    pub last: Network<S>,
    pub history: TrainHistory,
}

/// Mixes three integers into one seed (splitmix64 finalizer).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Predicted class and probabilities for each trial, eval mode.
pub fn predict<S: Scalar>(net: &Network<S>, trials: &[&Trial<S>], batch_size: usize) -> Result<(Vec<usize>, Array2<S>)> {
    let k = net.cfg.class_count;
    let mut probs = Array2::zeros((trials.len(), k));
    for (ci, chunk) in trials.chunks(batch_size.max(1)).enumerate() {
        let flags = vec![false; chunk.len()];
        let batch = Batch::build(chunk, &flags, net.cfg.window_len, net.cfg.step)?;
        let pass = net.forward(batch.windows.view(), Mode::Eval, false)?;
        let start = ci * batch_size.max(1);
        probs
            .slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&pass.probs);
    }
    let preds = probs
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                .0
        })
        .collect();
    Ok((preds, probs))
}

fn accuracy_on<S: Scalar>(net: &Network<S>, trials: &[&Trial<S>], batch_size: usize) -> Result<f64> {
    if trials.is_empty() {
        return Ok(0.0);
    }
    let (preds, _) = predict(net, trials, batch_size)?;
    let hits = preds
        .iter()
        .zip(trials)
        .filter(|(p, t)| t.label == Some(**p))
        .count();
    Ok(hits as f64 / trials.len() as f64)
}

/// Trains a fresh network on `trials`. Labels are visible only for ids in
/// `mask.labeled_ids`; a class-stratified share of those is held out for validation and
/// never enters a training batch.
pub fn train<S: Scalar>(
    trials: &[Trial<S>],
    mask: &LabelMask,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if trials.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let labeled: Vec<usize> = (0..trials.len())
        .filter(|&i| trials[i].label.is_some() && mask.is_labeled(&trials[i].trial_id))
        .collect();
    if labeled.is_empty() {
        return Err(Error::Training("no labeled trials; validation is impossible".into()));
    }
    let val: BTreeSet<usize> = if labeled.len() == 1 {
        labeled.iter().copied().collect()
    } else {
        let ids: Vec<String> = labeled.iter().map(|&i| trials[i].trial_id.clone()).collect();
        let labels: Vec<Option<usize>> = labeled.iter().map(|&i| trials[i].label).collect();
        let held = apply_label_mask(&ids, &labels, cfg.val_fraction, mix_seed(cfg.seed, 1, 0))?;
        let mut set: BTreeSet<usize> = labeled
            .iter()
            .copied()
            .filter(|&i| held.labeled_ids.contains(&trials[i].trial_id))
            .collect();
        if set.is_empty() {
            set.insert(labeled[0]);
        }
        if set.len() == labeled.len() {
            let last = *set.iter().next_back().unwrap();
            set.remove(&last);
        }
        set
    };
    let labeled_set: BTreeSet<usize> = labeled.iter().copied().collect();
    let pool: Vec<usize> = (0..trials.len())
        .filter(|i| labeled.len() == 1 || !val.contains(i))
        .filter(|i| cfg.semi_supervised || labeled_set.contains(i))
        .collect();
    let pool_flags: Vec<bool> = pool.iter().map(|i| labeled_set.contains(i)).collect();
    let val_refs: Vec<&Trial<S>> = val.iter().map(|&i| &trials[i]).collect();
    let pool_refs: Vec<&Trial<S>> = pool.iter().map(|&i| &trials[i]).collect();
    info!(
        "training on {} trials ({} labeled), validating on {}",
        pool.len(),
        pool_flags.iter().filter(|&&f| f).count(),
        val.len()
    );

    let settings = cfg.loss_settings(model);
    let reconstruct = settings.weights.beta.iter().any(|&b| b != 0.0);
    let mut net = Network::<S>::new(model.clone(), cfg.seed)?;
    let mut adam = Adam::new(&net.params, cfg.learning_rate);
    let mut history = TrainHistory {
        train_ids: pool.iter().map(|&i| trials[i].trial_id.clone()).collect(),
        val_ids: val.iter().map(|&i| trials[i].trial_id.clone()).collect(),
        ..TrainHistory::default()
    };
    let mut best: Option<Network<S>> = None;

    for epoch in 0..cfg.epochs {
        let clock = Instant::now();
        let batches = epoch_batches(
            &pool_flags,
            cfg.batch_size,
            cfg.min_labeled_per_batch,
            mix_seed(cfg.seed, 2, epoch as u64),
        );
        let mut losses = Vec::with_capacity(batches.len());
        for (bi, members) in batches.iter().enumerate() {
            let refs: Vec<&Trial<S>> = members.iter().map(|&i| pool_refs[i]).collect();
            let flags: Vec<bool> = members.iter().map(|&i| pool_flags[i]).collect();
            let batch = Batch::build(&refs, &flags, model.window_len, model.step)?;
            let mode = Mode::Train {
                seed: mix_seed(cfg.seed, 3 + epoch as u64, bi as u64),
            };
            let pass = net.forward(batch.windows.view(), mode, reconstruct)?;
            let eval = total_loss(
                &LossInputs {
                    pass: &pass,
                    windows: batch.windows.view(),
                    raw: batch.raw.view(),
                    labels: &batch.labels,
                    centers: net.params.v2(net.layout.centers),
                    fc2_w: net.params.v2(net.layout.fc2_w),
                },
                &settings,
            )?;
            if !eval.breakdown.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {} batch {bi}",
                    epoch + 1
                )));
            }
            let mut grads = net.backward(&pass, &eval.grads)?;
            grads.accumulate(net.layout.fc2_w, &eval.fc2_w_grad);
            adam.step(&mut net.params, &grads);
            net.update_running_stats(&pass);

            let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch.labels[i].is_some()).collect();
            if !rows.is_empty() {
                let ys: Vec<usize> = rows.iter().map(|&i| batch.labels[i].unwrap()).collect();
                let feats = pass.features.select(Axis(0), &rows);
                let updated = update_centers(net.params.v2(net.layout.centers), feats.view(), &ys, cfg.center_alpha)?;
                net.params.m2(net.layout.centers).assign(&updated);
            }
            losses.push(eval.breakdown);
        }
        if !net.params.all_finite() {
            return Err(Error::Training(format!("parameters diverged at epoch {}", epoch + 1)));
        }
        let val_accuracy = accuracy_on(&net, &val_refs, cfg.eval_batch_size)?;
        let train_accuracy = if cfg.track_train_accuracy {
            Some(accuracy_on(&net, &pool_refs, cfg.eval_batch_size)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: LossBreakdown::mean(&losses),
            val_accuracy,
            train_accuracy,
            seconds: clock.elapsed().as_secs_f64(),
        };
        debug!(
            "epoch {} total {:.4} val {:.3}",
            record.epoch, record.loss.total, record.val_accuracy
        );
        if best.is_none() || val_accuracy >= history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            best = Some(net.clone());
        }
        history.epochs.push(record);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        last: net,
        history,
    })
}
