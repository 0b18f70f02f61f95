use ndarray::Array2;

use crate::error::{Error, Result};

fn check(preds: &[usize], labels: &[usize], k: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&v| v >= k) {
        return Err(Error::InvalidArgument(format!("class {bad} >= class count {k}")));
    }
    Ok(())
}

/// Share of predictions equal to the label; `0` for empty input.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `K × K` counts with ground truth on rows and predictions on columns.
pub fn confusion_counts(preds: &[usize], labels: &[usize], k: usize) -> Result<Array2<usize>> {
    check(preds, labels, k)?;
    let mut m = Array2::zeros((k, k));
    for (&p, &l) in preds.iter().zip(labels) {
        m[[l, p]] += 1;
    }
    Ok(m)
}

/// Confusion matrix, optionally with each nonzero row scaled to sum to one.
pub fn confusion(preds: &[usize], labels: &[usize], k: usize, normalize: bool) -> Result<Array2<f64>> {
    let counts = confusion_counts(preds, labels, k)?;
    let mut m = counts.mapv(|c| c as f64);
    if normalize {
        for mut row in m.rows_mut() {
            let s: f64 = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
    }
    Ok(m)
}

/// Unweighted mean over classes of `2PR / (P + R)`, a class scoring 0 when `P + R = 0`.
pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    let c = confusion_counts(preds, labels, k)?;
    if k == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..k {
        let tp = c[[i, i]] as f64;
        let predicted: f64 = c.column(i).sum() as f64;
        let actual: f64 = c.row(i).sum() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        if p + r > 0.0 {
            sum += 2.0 * p * r / (p + r);
        }
    }
    Ok(sum / k as f64)
}
