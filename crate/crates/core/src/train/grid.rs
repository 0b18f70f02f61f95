use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mix_seed, train, TrainConfig};
use crate::data::{LabelMask, LossWeights, ModelConfig, Trial};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Candidate values shared by every weight, and how they are combined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub values: Vec<f64>,
    /// Search β and η per column instead of one shared value each.
    pub full_factorial: bool,
    /// Evaluate at most this many combinations, drawn without replacement.
    pub cap: Option<usize>,
}

impl Default for GridSpec {
    /// `0, 0.1, …, 0.5`
    fn default() -> Self {
        GridSpec {
            values: (0..=5).map(|i| f64::from(i) / 10.0).collect(),
            full_factorial: false,
            cap: None,
        }
    }
}

impl GridSpec {
    pub fn size(&self, columns: usize) -> usize {
        let dims = if self.full_factorial { 2 * columns + 1 } else { 3 };
        self.values.len().pow(dims as u32)
    }

    fn decode(&self, columns: usize, mut index: usize) -> LossWeights {
        let v = self.values.len();
        let mut digit = || {
            let d = index % v;
            index /= v;
            self.values[d]
        };
        if self.full_factorial {
            // most significant first so enumeration is lexicographic in (β, η, γ)
            let mut digits: Vec<f64> = (0..2 * columns + 1).map(|_| digit()).collect();
            digits.reverse();
            LossWeights {
                beta: digits[..columns].to_vec(),
                eta: digits[columns..2 * columns].to_vec(),
                gamma: digits[2 * columns],
            }
        } else {
            let g = digit();
            let e = digit();
            let b = digit();
            LossWeights::uniform(columns, b, e, g)
        }
    }

    /// Every combination to evaluate, in enumeration order.
    pub fn combinations(&self, columns: usize, seed: u64) -> Result<Vec<LossWeights>> {
        if self.values.is_empty() {
            return Err(Error::Config("grid values are empty".into()));
        }
        let total = self.size(columns);
        let indices: Vec<usize> = match self.cap {
            Some(cap) if cap < total => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut v = sample(&mut rng, total, cap).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..total).collect(),
        };
        Ok(indices.into_iter().map(|i| self.decode(columns, i)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub weights: LossWeights,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index of the winning row.
    pub best: usize,
}

impl GridResult {
    pub fn best_weights(&self) -> &LossWeights {
        &self.rows[self.best].weights
    }
}

fn lex(a: &LossWeights) -> Vec<f64> {
    let mut v = a.beta.clone();
    v.extend(&a.eta);
    v.push(a.gamma);
    v
}

/// Highest validation accuracy; ties go to the smaller total weight, then to the
/// lexicographically smaller `(β, η, γ)`.
pub fn pick_best(rows: &[GridRow]) -> Option<usize> {
    (0..rows.len()).min_by(|&i, &j| {
        let (a, b) = (&rows[i], &rows[j]);
        b.val_accuracy
            .total_cmp(&a.val_accuracy)
            .then(a.weights.total().total_cmp(&b.weights.total()))
            .then_with(|| {
                lex(&a.weights)
                    .iter()
                    .zip(lex(&b.weights).iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    })
}

/// Trains one model per weight combination (same seed and split for all) and scores
/// each by its best validation accuracy. `jobs` bounds the worker threads.
pub fn grid_search<S: Scalar>(
    trials: &[Trial<S>],
    mask: &LabelMask,
    model: &ModelConfig,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<GridResult> {
    let combos = cfg.grid.combinations(model.columns.len(), mix_seed(cfg.seed, 7, 0))?;
    let run = |w: &LossWeights| -> Result<GridRow> {
        let tc = TrainConfig {
            weights: w.clone(),
            ..cfg.clone()
        };
        let out = train(trials, mask, model, &tc)?;
        Ok(GridRow {
            weights: w.clone(),
            val_accuracy: out.history.best_val_accuracy,
        })
    };
    let rows: Vec<GridRow> = if jobs <= 1 {
        combos.iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| combos.par_iter().map(run).collect::<Result<_>>())?
    };
    let best = pick_best(&rows).expect("grid is nonempty");
    Ok(GridResult { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_contains_published_weights() {
        let g = GridSpec::default();
        assert_eq!(g.values.len(), 6);
        assert_eq!(g.size(3), 216);
        let combos = g.combinations(3, 0).unwrap();
        assert_eq!(combos.len(), 216);
        assert!(combos.iter().any(|w| w.beta == vec![0.2; 3] && w.gamma == 0.3));
        let full = GridSpec {
            full_factorial: true,
            cap: Some(500),
            ..GridSpec::default()
        };
        assert_eq!(full.size(3), 6usize.pow(7));
        let sampled = full.combinations(3, 1).unwrap();
        assert_eq!(sampled.len(), 500);
        let all = GridSpec {
            full_factorial: true,
            ..GridSpec::default()
        };
        let published = LossWeights::published();
        assert!(all.combinations(3, 0).unwrap().contains(&published));
    }

    #[test]
    fn two_value_grid_has_eight_points() {
        let g = GridSpec {
            values: vec![0.0, 0.1],
            ..GridSpec::default()
        };
        let c = g.combinations(2, 0).unwrap();
        assert_eq!(c.len(), 8);
        let mut dedup = c.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 8);
    }

    #[test]
    fn ties_prefer_smaller_total() {
        let row = |b: f64, e: f64, g: f64, acc: f64| GridRow {
            weights: LossWeights::uniform(2, b, e, g),
            val_accuracy: acc,
        };
        let rows = vec![row(0.2, 0.1, 0.3, 0.8), row(0.1, 0.1, 0.1, 0.8), row(0.5, 0.5, 0.5, 0.7)];
        assert_eq!(pick_best(&rows), Some(1));
        let rows = vec![row(0.1, 0.0, 0.0, 0.8), row(0.0, 0.1, 0.0, 0.8)];
        assert_eq!(pick_best(&rows), Some(1));
        let rows = vec![row(0.0, 0.0, 0.0, 0.5), row(0.5, 0.5, 0.5, 0.9)];
        assert_eq!(pick_best(&rows), Some(1));
    }

    #[test]
    fn empty_values_rejected() {
        let g = GridSpec {
            values: vec![],
            ..GridSpec::default()
        };
        assert!(g.combinations(1, 0).is_err());
    }
}
