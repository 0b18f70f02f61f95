use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Trial;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::windowing::stack_windows;

/// Network-ready tensors for one minibatch.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    /// `(B, n, C, m)`
    pub windows: Array4<S>,
    /// Flattened trials `(B, C·T)`.
    pub raw: Array2<S>,
    /// Visible label per member; `None` for unlabeled trials.
    pub labels: Vec<Option<usize>>,
}

impl<S: Scalar> Batch<S> {
    pub fn build(trials: &[&Trial<S>], labeled: &[bool], window_len: usize, step: usize) -> Result<Self> {
        if trials.len() != labeled.len() {
            return Err(Error::Shape(format!("{} trials, {} label flags", trials.len(), labeled.len())));
        }
        let windows = stack_windows(trials, window_len, step)?;
        let width = trials[0].data.len();
        let mut raw = Array2::zeros((trials.len(), width));
        for (mut row, t) in raw.rows_mut().into_iter().zip(trials) {
            if t.data.len() != width {
                return Err(Error::Shape(format!("trial {} has a different shape", t.trial_id)));
            }
            row.iter_mut().zip(t.data.iter()).for_each(|(r, &v)| *r = v);
        }
        let labels = trials
            .iter()
            .zip(labeled)
            .map(|(t, &l)| if l { t.label } else { None })
            .collect();
        Ok(Batch { windows, raw, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Splits `0..labeled.len()` into shuffled batches; every index appears exactly once and the
/// last partial batch is kept. With `min_labeled > 0` the labeled indices are dealt
/// round-robin first so each batch receives its share before unlabeled ones fill it up.
pub fn epoch_batches(labeled: &[bool], batch_size: usize, min_labeled: usize, seed: u64) -> Vec<Vec<usize>> {
    let n = labeled.len();
    if n == 0 {
        return Vec::new();
    }
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if min_labeled == 0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut lab: Vec<usize> = (0..n).filter(|&i| labeled[i]).collect();
    let mut unl: Vec<usize> = (0..n).filter(|&i| !labeled[i]).collect();
    lab.shuffle(&mut rng);
    unl.shuffle(&mut rng);
    let count = n.div_ceil(batch_size);
    let sizes: Vec<usize> = (0..count)
        .map(|b| if b + 1 < count { batch_size } else { n - batch_size * (count - 1) })
        .collect();
    let mut batches: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let mut b = 0;
    for i in lab {
        while batches[b % count].len() >= sizes[b % count] {
            b += 1;
        }
        batches[b % count].push(i);
        b += 1;
    }
    let mut rest = unl.into_iter();
    for (batch, &size) in batches.iter_mut().zip(&sizes) {
        while batch.len() < size {
            batch.push(rest.next().expect("sizes add up to n"));
        }
        batch.shuffle(&mut rng);
    }
    batches
}
