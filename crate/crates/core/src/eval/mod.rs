//! Subject-independent evaluation: cross-validation over a split plan, metrics,
//! label-fraction sweeps, ablations, significance testing and latent export.

mod metrics;
mod report;
mod variant;
mod wilcoxon;

pub use metrics::{accuracy, confusion, confusion_counts, macro_f1};
pub use report::{confusion_pgm, mean_std, Aggregate, EvalReport, FoldReport, RepetitionSummary};
pub use variant::Variant;
pub use wilcoxon::{wilcoxon_exact, WILCOXON_MAX_N};

use std::collections::BTreeSet;
use std::str::FromStr;

use log::info;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_label_mask, Fold, ModelConfig, SplitPlan, Trial};
use crate::error::{Error, Result};
use crate::model::{Mode, Network};
use crate::scalar::Scalar;
use crate::train::{mix_seed, predict, train, Batch, TrainConfig};

/// Refuses a fold whose training and test subjects overlap.
pub fn check_fold(fold: &Fold) -> Result<()> {
    let train: BTreeSet<&String> = fold.train.iter().collect();
    let leaked: Vec<&String> = fold.test.iter().filter(|s| train.contains(s)).collect();
    if !leaked.is_empty() {
        return Err(Error::Leakage(format!(
            "fold {}: subjects {leaked:?} are in both train and test",
            fold.index
        )));
    }
    Ok(())
}

/// Runs `jobs` closures at a time, preserving input order in the output.
pub(crate) fn run_parallel<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Trains and tests one fold.
pub fn run_fold<S: Scalar>(
    trials: &[Trial<S>],
    fold: &Fold,
    fraction: f64,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldReport> {
    check_fold(fold)?;
    let train_subjects: BTreeSet<&str> = fold.train.iter().map(String::as_str).collect();
    let test_subjects: BTreeSet<&str> = fold.test.iter().map(String::as_str).collect();
    let train_set: Vec<Trial<S>> = trials
        .iter()
        .filter(|t| train_subjects.contains(t.subject_id.as_str()))
        .cloned()
        .collect();
    let test_set: Vec<&Trial<S>> = trials
        .iter()
        .filter(|t| test_subjects.contains(t.subject_id.as_str()))
        .collect();
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidArgument(format!("fold {} has an empty train or test set", fold.index)));
    }
    let fold_seed = mix_seed(cfg.seed, 101, fold.index as u64);
    let ids: Vec<String> = train_set.iter().map(|t| t.trial_id.clone()).collect();
    let labels: Vec<Option<usize>> = train_set.iter().map(|t| t.label).collect();
    let mask = apply_label_mask(&ids, &labels, fraction, fold_seed)?;
    let fold_cfg = TrainConfig {
        seed: fold_seed,
        ..cfg.clone()
    };
    let outcome = train(&train_set, &mask, model, &fold_cfg)?;
    let (preds, _) = predict(&outcome.best, &test_set, cfg.eval_batch_size)?;
    let truth: Vec<usize> = test_set
        .iter()
        .map(|t| {
            t.label
                .ok_or_else(|| Error::InvalidArgument(format!("test trial {} has no label", t.trial_id)))
        })
        .collect::<Result<_>>()?;
    let k = model.class_count;
    let acc = accuracy(&preds, &truth)?;
    info!("fold {} accuracy {acc:.3}", fold.index);
    Ok(FoldReport {
        index: fold.index,
        repetition: fold.repetition,
        accuracy: acc,
        macro_f1: macro_f1(&preds, &truth, k)?,
        confusion: rows_of(&confusion(&preds, &truth, k, true)?),
        counts: rows_of(&confusion_counts(&preds, &truth, k)?),
        train_subjects: fold.train.clone(),
        test_subjects: fold.test.clone(),
        n_labeled: mask.labeled_count(),
        n_unlabeled: mask.unlabeled_count(),
        n_test: test_set.len(),
        best_epoch: outcome.history.best_epoch + 1,
        best_val_accuracy: outcome.history.best_val_accuracy,
    })
}

fn rows_of<T: Clone>(m: &Array2<T>) -> Vec<Vec<T>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Cross-validates over every fold of `plan`. Each fold is checked for subject overlap
/// before any training starts.
pub fn run_cv<S: Scalar>(
    trials: &[Trial<S>],
    plan: &SplitPlan,
    fraction: f64,
    model: &ModelConfig,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<EvalReport> {
    let present: BTreeSet<&str> = trials.iter().map(|t| t.subject_id.as_str()).collect();
    let missing: Vec<String> = plan
        .subjects()
        .into_iter()
        .filter(|s| !present.contains(s.as_str()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!("plan subjects missing from dataset: {missing:?}")));
    }
    for fold in &plan.folds {
        check_fold(fold)?;
    }
    let folds = run_parallel(&plan.folds, jobs, |f| run_fold(trials, f, fraction, model, cfg))?;
    Ok(EvalReport::new(plan.kind.to_string(), plan.seed, fraction, "full".into(), folds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    /// Labeled, unlabeled and total training trials, summed over folds.
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_total: usize,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionTable {
    pub rows: Vec<FractionRow>,
    pub reports: Vec<EvalReport>,
}

impl FractionTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["fraction", "n_labeled", "n_unlabeled", "n_total", "accuracy", "accuracy_std", "macro_f1"])?;
        for r in &self.rows {
            w.serialize((
                r.fraction,
                r.n_labeled,
                r.n_unlabeled,
                r.n_total,
                r.accuracy,
                r.accuracy_std,
                r.macro_f1,
            ))?;
        }
        finish_csv(w)
    }
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One cross-validation per label fraction on the same plan.
pub fn label_fraction_experiment<S: Scalar>(
    trials: &[Trial<S>],
    plan: &SplitPlan,
    fractions: &[f64],
    model: &ModelConfig,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<FractionTable> {
    let mut rows = Vec::with_capacity(fractions.len());
    let mut reports = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let report = run_cv(trials, plan, fraction, model, cfg, jobs)?;
        let n_labeled: usize = report.folds.iter().map(|f| f.n_labeled).sum();
        let n_unlabeled: usize = report.folds.iter().map(|f| f.n_unlabeled).sum();
        rows.push(FractionRow {
            fraction,
            n_labeled,
            n_unlabeled,
            n_total: n_labeled + n_unlabeled,
            accuracy: report.aggregate.mean_accuracy,
            accuracy_std: report.aggregate.std_accuracy,
            macro_f1: report.aggregate.mean_f1,
        });
        reports.push(report);
    }
    Ok(FractionTable { rows, reports })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub macro_f1: f64,
    pub f1_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub reports: Vec<EvalReport>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "accuracy", "accuracy_std", "macro_f1", "f1_std"])?;
        for r in &self.rows {
            w.serialize((&r.variant, r.accuracy, r.accuracy_std, r.macro_f1, r.f1_std))?;
        }
        finish_csv(w)
    }
}

/// Parses a comma-separated variant list such as `full,disable-lstm,single-column:0`.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Variant::from_str)
        .collect()
}

/// Cross-validates every variant under identical seeds and splits.
pub fn ablate<S: Scalar>(
    trials: &[Trial<S>],
    plan: &SplitPlan,
    fraction: f64,
    model: &ModelConfig,
    cfg: &TrainConfig,
    variants: &[Variant],
    jobs: usize,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let (m, c) = v.apply(model, cfg)?;
        let mut report = run_cv(trials, plan, fraction, &m, &c, jobs)?;
        report.variant = v.to_string();
        rows.push(AblationRow {
            variant: v.to_string(),
            accuracy: report.aggregate.mean_accuracy,
            accuracy_std: report.aggregate.std_accuracy,
            macro_f1: report.aggregate.mean_f1,
            f1_std: report.aggregate.std_f1,
        });
        reports.push(report);
    }
    Ok(AblationTable { rows, reports })
}

/// Which representation [`export_latents`] writes out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentLayer {
    /// Output layer of the classifier, one value per class.
    FinalFc,
    /// Concatenated column latents.
    ConcatLatent,
}

impl FromStr for LatentLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final-fc" => Ok(LatentLayer::FinalFc),
            "concat-latent" => Ok(LatentLayer::ConcatLatent),
            other => Err(Error::InvalidArgument(format!("unknown latent layer {other:?}"))),
        }
    }
}

/// CSV with `trial_id, subject_id, label, v0, v1, …` per trial (eval mode).
pub fn export_latents<S: Scalar>(
    net: &Network<S>,
    trials: &[&Trial<S>],
    layer: LatentLayer,
    batch_size: usize,
) -> Result<String> {
    let width = match layer {
        LatentLayer::FinalFc => net.cfg.class_count,
        LatentLayer::ConcatLatent => net.cfg.concat_width(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trial_id".to_string(), "subject_id".into(), "label".into()];
    header.extend((0..width).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for chunk in trials.chunks(batch_size.max(1)) {
        let flags = vec![false; chunk.len()];
        let batch = Batch::build(chunk, &flags, net.cfg.window_len, net.cfg.step)?;
        let pass = net.forward(batch.windows.view(), Mode::Eval, false)?;
        let values = match layer {
            LatentLayer::FinalFc => &pass.logits,
            LatentLayer::ConcatLatent => &pass.concat,
        };
        for (t, row) in chunk.iter().zip(values.rows()) {
            let mut rec = vec![
                t.trial_id.clone(),
                t.subject_id.clone(),
                t.label.map(|l| l.to_string()).unwrap_or_default(),
            ];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    finish_csv(w)
}
