use crate::error::{Error, Result};

/// Largest sample handled by exact enumeration.
pub const WILCOXON_MAX_N: usize = 25;

/// Exact two-sided p-value of the Wilcoxon signed-rank test. Zero differences are
/// dropped and tied magnitudes share their average rank; the null distribution of the
/// positive rank sum is computed over all `2ⁿ` sign assignments.
pub fn wilcoxon_exact(differences: &[f64]) -> Result<f64> {
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("non-finite difference".into()));
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Ok(1.0);
    }
    if n > WILCOXON_MAX_N {
        return Err(Error::InvalidArgument(format!(
            "{n} nonzero differences exceed the exact regime of {WILCOXON_MAX_N}"
        )));
    }
    // doubled ranks keep average ranks integral
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| nonzero[a].abs().total_cmp(&nonzero[b].abs()));
    let mut ranks = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nonzero[order[j + 1]].abs() == nonzero[order[i]].abs() {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1, average doubled = i + j + 2
        for &o in &order[i..=j] {
            ranks[o] = i + j + 2;
        }
        i = j + 1;
    }
    let observed: usize = (0..n).filter(|&k| nonzero[k] > 0.0).map(|k| ranks[k]).sum();
    let max: usize = ranks.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for &r in &ranks {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total = 2f64.powi(n as i32);
    let lower: u64 = counts[..=observed].iter().sum();
    let upper: u64 = counts[observed..].iter().sum();
    let tail = lower.min(upper) as f64 / total;
    Ok((2.0 * tail).min(1.0))
}
