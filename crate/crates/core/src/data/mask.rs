use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of training trial ids into a labeled set and an unlabeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMask {
    pub labeled_ids: BTreeSet<String>,
    pub unlabeled_ids: BTreeSet<String>,
    pub fraction: f64,
}

impl LabelMask {
    pub fn is_labeled(&self, id: &str) -> bool {
        self.labeled_ids.contains(id)
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_ids.len()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled_ids.len()
    }
}

/// Draws `round(fraction · N)` trials to keep their labels, stratified by class.
///
/// `labels[i]` is the class of `trial_ids[i]` when known; trials without a label form
/// their own stratum. Quotas use largest-remainder apportionment so the total is exact,
/// and when `fraction · N >= K` every class keeps at least one labeled trial.
pub fn apply_label_mask(
    trial_ids: &[String],
    labels: &[Option<usize>],
    fraction: f64,
    seed: u64,
) -> Result<LabelMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if labels.len() != trial_ids.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} trial ids",
            labels.len(),
            trial_ids.len()
        )));
    }
    let mut strata: BTreeMap<Option<usize>, Vec<String>> = BTreeMap::new();
    for (id, y) in trial_ids.iter().zip(labels) {
        strata.entry(*y).or_default().push(id.clone());
    }
    let unique: BTreeSet<&String> = trial_ids.iter().collect();
    if unique.len() != trial_ids.len() {
        return Err(Error::InvalidArgument("duplicate trial ids".into()));
    }
    let n = trial_ids.len();
    let target = (fraction * n as f64).round() as usize;

    let keys: Vec<Option<usize>> = strata.keys().copied().collect();
    let exact: Vec<f64> = keys
        .iter()
        .map(|k| fraction * strata[k].len() as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = target.saturating_sub(quota.iter().sum());
    let mut by_remainder: Vec<usize> = (0..keys.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle().take(keys.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[i] < strata[&keys[i]].len() {
            quota[i] += 1;
            remaining -= 1;
        }
    }

    let class_strata: Vec<usize> = (0..keys.len()).filter(|&i| keys[i].is_some()).collect();
    if fraction * n as f64 >= class_strata.len() as f64 {
        for &i in &class_strata {
            if quota[i] == 0 {
                // take one from the largest quota so the total is unchanged
                let donor = (0..keys.len())
                    .filter(|&j| quota[j] > 1 || (quota[j] == 1 && keys[j].is_none()))
                    .max_by_key(|&j| (quota[j], std::cmp::Reverse(j)));
                if let Some(d) = donor {
                    quota[d] -= 1;
                }
                quota[i] = 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled_ids = BTreeSet::new();
    let mut unlabeled_ids = BTreeSet::new();
    for (i, key) in keys.iter().enumerate() {
        let mut ids = strata[key].clone();
        ids.sort();
        ids.shuffle(&mut rng);
        let (l, u) = ids.split_at(quota[i].min(ids.len()));
        labeled_ids.extend(l.iter().cloned());
        unlabeled_ids.extend(u.iter().cloned());
    }
    Ok(LabelMask {
        labeled_ids,
        unlabeled_ids,
        fraction,
    })
}
