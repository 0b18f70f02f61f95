use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::finish_csv;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub index: usize,
    pub repetition: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Row-normalized confusion matrix, ground truth on rows.
    pub confusion: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// 1-based epoch of the selected model.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

impl Aggregate {
    pub fn of(acc: &[f64], f1: &[f64]) -> Self {
        let (ma, sa) = mean_std(acc);
        let (mf, sf) = mean_std(f1);
        Aggregate {
            mean_accuracy: ma,
            std_accuracy: sa,
            mean_f1: mf,
            std_f1: sf,
        }
    }
}

/// Mean and population standard deviation; zeros for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Fold means within one repetition of a repeated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionSummary {
    pub repetition: usize,
    pub folds: usize,
    pub mean_accuracy: f64,
    pub mean_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub seed: u64,
    pub label_fraction: f64,
    pub variant: String,
    pub folds: Vec<FoldReport>,
    /// Over all folds.
    pub aggregate: Aggregate,
    pub repetitions: Vec<RepetitionSummary>,
}

impl EvalReport {
    pub fn new(split: String, seed: u64, label_fraction: f64, variant: String, folds: Vec<FoldReport>) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let f1: Vec<f64> = folds.iter().map(|f| f.macro_f1).collect();
        let mut by_rep: BTreeMap<usize, Vec<&FoldReport>> = BTreeMap::new();
        for f in &folds {
            by_rep.entry(f.repetition).or_default().push(f);
        }
        let repetitions = by_rep
            .into_iter()
            .map(|(repetition, fs)| {
                let n = fs.len() as f64;
                RepetitionSummary {
                    repetition,
                    folds: fs.len(),
                    mean_accuracy: fs.iter().map(|f| f.accuracy).sum::<f64>() / n,
                    mean_f1: fs.iter().map(|f| f.macro_f1).sum::<f64>() / n,
                }
            })
            .collect();
        EvalReport {
            split,
            seed,
            label_fraction,
            variant,
            aggregate: Aggregate::of(&acc, &f1),
            folds,
            repetitions,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per fold.
    pub fn folds_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "fold",
            "repetition",
            "accuracy",
            "macro_f1",
            "n_labeled",
            "n_unlabeled",
            "n_test",
            "best_epoch",
            "test_subjects",
        ])?;
        for f in &self.folds {
            w.serialize((
                f.index,
                f.repetition,
                f.accuracy,
                f.macro_f1,
                f.n_labeled,
                f.n_unlabeled,
                f.n_test,
                f.best_epoch,
                f.test_subjects.join(" "),
            ))?;
        }
        finish_csv(w)
    }

    /// Element-wise mean of the per-fold normalized confusion grids.
    pub fn mean_confusion(&self) -> Vec<Vec<f64>> {
        let k = self.folds.first().map_or(0, |f| f.confusion.len());
        let n = self.folds.len().max(1) as f64;
        (0..k)
            .map(|r| {
                (0..k)
                    .map(|c| self.folds.iter().map(|f| f.confusion[r][c]).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    }

    /// Confusion grid of one fold, or the fold mean when `fold` is `None`.
    pub fn confusion_csv(&self, fold: Option<usize>) -> Result<String> {
        let grid = match fold {
            Some(i) => self.folds[i].confusion.clone(),
            None => self.mean_confusion(),
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        let k = grid.len();
        let mut header = vec!["truth".to_string()];
        header.extend((0..k).map(|c| format!("pred{c}")));
        w.write_record(&header)?;
        for (r, row) in grid.iter().enumerate() {
            let mut rec = vec![r.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }
}

/// Grayscale binary PGM of a row-normalized confusion matrix, `cell` pixels per entry;
/// darker means larger.
pub fn confusion_pgm(grid: &[Vec<f64>], cell: usize) -> Vec<u8> {
    let k = grid.len();
    let side = k * cell;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            let v = grid[y / cell][x / cell].clamp(0.0, 1.0);
            out.push((255.0 * (1.0 - v)).round() as u8);
        }
    }
    out
}
