//! The composite objective: cross-entropy and center loss on labeled trials,
//! reconstruction error and distance preservation on every trial, and the L2 penalty on
//! the output layer. Each term comes with its analytic gradient.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LossWeights;
use crate::error::{Error, Result};
use crate::model::layers::softmax_rows_backward;
use crate::model::{ForwardPass, OutputGrads};
use crate::scalar::Scalar;

/// Probabilities are clamped to at least this before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-step value of every objective term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub center: f64,
    /// `ce + γ·center`
    pub supervised: f64,
    pub mse: f64,
    pub ds: f64,
    /// `mse + ds`
    pub unsupervised: f64,
    pub l2_penalty: f64,
    /// `unsupervised + supervised + l2_penalty`
    pub total: f64,
    /// Labeled members of the batch; `0` means the supervised terms were defined as zero.
    pub labeled: usize,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 8] = [
        "ce",
        "center",
        "supervised",
        "mse",
        "ds",
        "unsupervised",
        "l2_penalty",
        "total",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.ce,
            self.center,
            self.supervised,
            self.mse,
            self.ds,
            self.unsupervised,
            self.l2_penalty,
            self.total,
        ]
    }

    pub fn compose(ce: f64, center: f64, gamma: f64, mse: f64, ds: f64, l2: f64, labeled: usize) -> Self {
        let supervised = ce + gamma * center;
        let unsupervised = mse + ds;
        LossBreakdown {
            ce,
            center,
            supervised,
            mse,
            ds,
            unsupervised,
            l2_penalty: l2,
            total: unsupervised + supervised + l2,
            labeled,
        }
    }

    /// Element-wise mean of several breakdowns (for epoch summaries).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 8];
        for it in items {
            for (a, v) in acc.iter_mut().zip(it.values()) {
                *a += v;
            }
        }
        LossBreakdown {
            ce: acc[0] / n,
            center: acc[1] / n,
            supervised: acc[2] / n,
            mse: acc[3] / n,
            ds: acc[4] / n,
            unsupervised: acc[5] / n,
            l2_penalty: acc[6] / n,
            total: acc[7] / n,
            labeled: items.iter().map(|i| i.labeled).sum(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {y} >= class count {classes}")));
    }
    Ok(())
}

/// Mean negative log probability of the true class; `0` for an empty batch.
pub fn cross_entropy<S: Scalar>(probs: ArrayView2<S>, labels: &[usize]) -> Result<S> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    if labels.is_empty() {
        return Ok(S::zero());
    }
    let floor = S::lit(PROB_FLOOR);
    let sum: S = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(floor).ln())
        .sum();
    Ok(sum / S::lit(labels.len() as f64))
}

/// Gradient of [`cross_entropy`] with respect to the probabilities.
pub fn cross_entropy_grad<S: Scalar>(probs: ArrayView2<S>, labels: &[usize]) -> Result<Array2<S>> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    let mut g = Array2::zeros(probs.raw_dim());
    if labels.is_empty() {
        return Ok(g);
    }
    let floor = S::lit(PROB_FLOOR);
    let n = S::lit(labels.len() as f64);
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        if p > floor {
            g[[i, y]] = -S::one() / (n * p);
        }
    }
    Ok(g)
}

/// `½ Σ_i ‖f_i − c_{y_i}‖²` over the given (labeled) rows.
pub fn center_loss<S: Scalar>(features: ArrayView2<S>, labels: &[usize], centers: ArrayView2<S>) -> Result<S> {
    check_labels(labels, features.nrows(), centers.nrows())?;
    if features.ncols() != centers.ncols() {
        return Err(Error::Shape(format!(
            "features have {} dims, centers {}",
            features.ncols(),
            centers.ncols()
        )));
    }
    let half = S::lit(0.5);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let diff = &features.row(i) - &centers.row(y);
            half * diff.dot(&diff)
        })
        .sum())
}

/// Gradient of [`center_loss`] with respect to the features: `f_i − c_{y_i}`.
pub fn center_loss_grad<S: Scalar>(features: ArrayView2<S>, labels: &[usize], centers: ArrayView2<S>) -> Result<Array2<S>> {
    check_labels(labels, features.nrows(), centers.nrows())?;
    let mut g = features.to_owned();
    for (i, &y) in labels.iter().enumerate() {
        let mut row = g.row_mut(i);
        row -= &centers.row(y);
    }
    Ok(g)
}

/// Moves each center present in the batch toward its class mean:
/// `c_k ← c_k − alpha·(c_k − mean_k)`.
pub fn update_centers<S: Scalar>(
    centers: ArrayView2<S>,
    features: ArrayView2<S>,
    labels: &[usize],
    alpha: f64,
) -> Result<Array2<S>> {
    check_labels(labels, features.nrows(), centers.nrows())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("center alpha {alpha} outside [0, 1]")));
    }
    let mut out = centers.to_owned();
    let a = S::lit(alpha);
    for k in 0..centers.nrows() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if rows.is_empty() {
            continue;
        }
        let mean = features
            .select(Axis(0), &rows)
            .mean_axis(Axis(0))
            .expect("non-empty class");
        let mut c = out.row_mut(k);
        let delta = (&c - &mean) * a;
        c -= &delta;
    }
    Ok(out)
}

fn check_recon<S: Scalar>(targets: &ArrayView4<S>, recons: &[ArrayView4<S>], beta: &[f64]) -> Result<()> {
    if recons.len() != beta.len() {
        return Err(Error::Shape(format!(
            "{} reconstructions for {} beta weights",
            recons.len(),
            beta.len()
        )));
    }
    for (i, r) in recons.iter().enumerate() {
        if r.dim() != targets.dim() {
            return Err(Error::Shape(format!(
                "column {i} reconstruction {:?} vs windows {:?}",
                r.dim(),
                targets.dim()
            )));
        }
    }
    Ok(())
}

/// `Σ_col β_col Σ_trials ‖D − D̂‖²`, summed over every window, channel and sample
/// without normalization.
pub fn mse_recon<S: Scalar>(targets: ArrayView4<S>, recons: &[ArrayView4<S>], beta: &[f64]) -> Result<S> {
    check_recon(&targets, recons, beta)?;
    let mut total = S::zero();
    for (r, &b) in recons.iter().zip(beta) {
        if b == 0.0 {
            continue;
        }
        let mut sq = S::zero();
        Zip::from(&targets).and(r).for_each(|&t, &y| {
            let d = t - y;
            sq += d * d;
        });
        total += S::lit(b) * sq;
    }
    Ok(total)
}

/// Gradient of [`mse_recon`] with respect to each reconstruction: `2β(D̂ − D)`.
pub fn mse_recon_grad<S: Scalar>(targets: ArrayView4<S>, recons: &[ArrayView4<S>], beta: &[f64]) -> Result<Vec<Array4<S>>> {
    check_recon(&targets, recons, beta)?;
    Ok(recons
        .iter()
        .zip(beta)
        .map(|(r, &b)| {
            let k = S::lit(2.0 * b);
            let mut g = r.to_owned();
            Zip::from(&mut g).and(&targets).for_each(|g, &t| *g = k * (*g - t));
            g
        })
        .collect())
}

/// Pair selection and scaling of the distance-preservation term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsOptions {
    /// Divide raw-space and latent-space distances by their group means.
    pub normalize: bool,
    /// Use at most this many ordered pairs per group, drawn without replacement.
    pub pair_budget: Option<usize>,
    pub seed: u64,
}

impl Default for DsOptions {
    fn default() -> Self {
        DsOptions {
            normalize: true,
            pair_budget: None,
            seed: 0,
        }
    }
}

fn ordered_pairs(group: &[usize], opts: &DsOptions, salt: u64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(group.len() * group.len().saturating_sub(1));
    for &k in group {
        for &l in group {
            if k != l {
                pairs.push((k, l));
            }
        }
    }
    match opts.pair_budget {
        Some(b) if b < pairs.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(salt);
            let mut picked: Vec<usize> = sample(&mut rng, pairs.len(), b).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| pairs[i]).collect()
        }
        _ => pairs,
    }
}

fn euclid<S: Scalar>(a: ndarray::ArrayView1<S>, b: ndarray::ArrayView1<S>) -> S {
    let mut s = S::zero();
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let d = x - y;
        s += d * d;
    });
    s.sqrt()
}

fn mean_or_one<S: Scalar>(v: &[S]) -> S {
    if v.is_empty() {
        return S::one();
    }
    let m = v.iter().copied().sum::<S>() / S::lit(v.len() as f64);
    if m > S::zero() {
        m
    } else {
        S::one()
    }
}

/// `Σ_col η_col Σ_groups Σ_(k,l) [d_H(D_k, D_l) − d_L(V_k, V_l)]²` over ordered pairs
/// within each group, with Euclidean distances on the flattened raw trials (`raw`,
/// one row per trial) and on each column's latent. Returns the value and the gradient
/// with respect to every column latent.
pub fn ds_loss<S: Scalar>(
    raw: ArrayView2<S>,
    latents: &[ArrayView2<S>],
    groups: &[Vec<usize>],
    eta: &[f64],
    opts: &DsOptions,
) -> Result<(S, Vec<Array2<S>>)> {
    if latents.len() != eta.len() {
        return Err(Error::Shape(format!("{} latents for {} eta weights", latents.len(), eta.len())));
    }
    let rows = raw.nrows();
    if let Some(l) = latents.iter().find(|l| l.nrows() != rows) {
        return Err(Error::Shape(format!("latent has {} rows, raw data {rows}", l.nrows())));
    }
    let two = S::lit(2.0);
    let mut total = S::zero();
    let mut grads: Vec<Array2<S>> = latents.iter().map(|l| Array2::zeros(l.raw_dim())).collect();
    for (gi, group) in groups.iter().enumerate() {
        if let Some(&bad) = group.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("group member {bad} out of {rows} rows")));
        }
        let pairs = ordered_pairs(group, opts, gi as u64);
        if pairs.is_empty() {
            continue;
        }
        let dh: Vec<S> = pairs.iter().map(|&(k, l)| euclid(raw.row(k), raw.row(l))).collect();
        let scale_h = if opts.normalize { mean_or_one(&dh) } else { S::one() };
        for (ci, (lat, &w)) in latents.iter().zip(eta).enumerate() {
            if w == 0.0 {
                continue;
            }
            let w = S::lit(w);
            let dl: Vec<S> = pairs.iter().map(|&(k, l)| euclid(lat.row(k), lat.row(l))).collect();
            let scale_l = if opts.normalize { mean_or_one(&dl) } else { S::one() };
            let resid: Vec<S> = dh
                .iter()
                .zip(&dl)
                .map(|(&h, &l)| h / scale_h - l / scale_l)
                .collect();
            total += w * resid.iter().map(|&r| r * r).sum::<S>();
            // d/d(dl_kl); the batch-mean scale couples every pair
            let coupling = if opts.normalize && dl.iter().any(|&v| v > S::zero()) {
                let p = S::lit(pairs.len() as f64);
                two * resid.iter().zip(&dl).map(|(&r, &l)| r * l).sum::<S>() / (scale_l * scale_l * p)
            } else {
                S::zero()
            };
            let g = &mut grads[ci];
            for (((&(k, l), &r), &d), _) in pairs.iter().zip(&resid).zip(&dl).zip(0..) {
                if d <= S::zero() {
                    continue;
                }
                let coeff = w * (-two * r / scale_l + coupling) / d;
                let diff = (&lat.row(k) - &lat.row(l)) * coeff;
                let mut gk = g.row_mut(k);
                gk += &diff;
                let mut gl = g.row_mut(l);
                gl -= &diff;
            }
        }
    }
    Ok((total, grads))
}

/// Settings of the full objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub l2_factor: f64,
    pub ds: DsOptions,
}

/// Everything the objective needs from one batch.
pub struct LossInputs<'a, S> {
    pub pass: &'a ForwardPass<S>,
    /// `(B, n, C, m)` windows, the reconstruction targets.
    pub windows: ArrayView4<'a, S>,
    /// Flattened raw trials `(B, C·T)` for raw-space distances.
    pub raw: ArrayView2<'a, S>,
    /// Label of each batch member when it belongs to the labeled set.
    pub labels: &'a [Option<usize>],
    pub centers: ArrayView2<'a, S>,
    pub fc2_w: ArrayView2<'a, S>,
}

pub struct LossEval<S> {
    pub breakdown: LossBreakdown,
    pub grads: OutputGrads<S>,
    /// Gradient of the L2 penalty with respect to the output-layer weights.
    pub fc2_w_grad: Array2<S>,
}

/// Evaluates `L = (L_mse + L_ds) + (L_ce + γ·L_c) + l2·‖W_fc2‖²` and its gradients
/// with respect to the network outputs. Supervised terms see labeled members only;
/// the unsupervised ones see every member.
pub fn total_loss<S: Scalar>(inp: &LossInputs<'_, S>, settings: &LossSettings) -> Result<LossEval<S>> {
    let pass = inp.pass;
    let columns = pass.columns.len();
    let w = &settings.weights;
    let violations = w.validate(columns);
    if let Some(v) = violations.first() {
        return Err(Error::Config(v.to_string()));
    }
    if inp.labels.len() != pass.batch {
        return Err(Error::Shape(format!("{} labels for batch of {}", inp.labels.len(), pass.batch)));
    }
    let mut grads = OutputGrads::zeros(columns);

    let labeled: Vec<usize> = (0..pass.batch).filter(|&i| inp.labels[i].is_some()).collect();
    let unlabeled: Vec<usize> = (0..pass.batch).filter(|&i| inp.labels[i].is_none()).collect();
    let ys: Vec<usize> = labeled.iter().map(|&i| inp.labels[i].unwrap()).collect();

    let (ce, center) = if labeled.is_empty() {
        (S::zero(), S::zero())
    } else {
        let probs = pass.probs.select(Axis(0), &labeled);
        let feats = pass.features.select(Axis(0), &labeled);
        let ce = cross_entropy(probs.view(), &ys)?;
        let center = center_loss(feats.view(), &ys, inp.centers)?;
        let dprobs_l = cross_entropy_grad(probs.view(), &ys)?;
        let mut dprobs = Array2::zeros(pass.probs.raw_dim());
        let mut dfeat = Array2::zeros(pass.features.raw_dim());
        let dcenter = center_loss_grad(feats.view(), &ys, inp.centers)? * S::lit(w.gamma);
        for (j, &i) in labeled.iter().enumerate() {
            dprobs.row_mut(i).assign(&dprobs_l.row(j));
            dfeat.row_mut(i).assign(&dcenter.row(j));
        }
        grads.logits = Some(softmax_rows_backward(pass.probs.view(), dprobs.view()));
        if w.gamma != 0.0 {
            grads.features = Some(dfeat);
        }
        (ce, center)
    };

    let mse = if w.beta.iter().any(|&b| b != 0.0) {
        let recons: Vec<ArrayView4<S>> = pass
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.recon
                    .as_ref()
                    .map(|r| r.view())
                    .ok_or_else(|| Error::Shape(format!("column {i} has no reconstruction")))
            })
            .collect::<Result<_>>()?;
        let value = mse_recon(inp.windows, &recons, &w.beta)?;
        for (i, g) in mse_recon_grad(inp.windows, &recons, &w.beta)?.into_iter().enumerate() {
            if w.beta[i] != 0.0 {
                grads.recon[i] = Some(g);
            }
        }
        value
    } else {
        S::zero()
    };

    let ds = if w.eta.iter().any(|&e| e != 0.0) {
        let latents: Vec<ArrayView2<S>> = pass.columns.iter().map(|c| c.latent().view()).collect();
        let groups = vec![labeled.clone(), unlabeled];
        let (value, lat_grads) = ds_loss(inp.raw, &latents, &groups, &w.eta, &settings.ds)?;
        for (i, g) in lat_grads.into_iter().enumerate() {
            if w.eta[i] != 0.0 {
                grads.latent[i] = Some(g);
            }
        }
        value
    } else {
        S::zero()
    };

    let l2f = S::lit(settings.l2_factor);
    let l2 = l2f * inp.fc2_w.iter().map(|&v| v * v).sum::<S>();
    let fc2_w_grad = inp.fc2_w.mapv(|v| S::lit(2.0) * l2f * v);

    let breakdown = LossBreakdown::compose(
        ce.to_f64_lossy(),
        center.to_f64_lossy(),
        w.gamma,
        mse.to_f64_lossy(),
        ds.to_f64_lossy(),
        l2.to_f64_lossy(),
        labeled.len(),
    );
    Ok(LossEval {
        breakdown,
        grads,
        fc2_w_grad,
    })
}

/// Same arithmetic as [`total_loss`] but in the input precision, for gradient checks.
pub fn total_loss_value<S: Scalar>(inp: &LossInputs<'_, S>, settings: &LossSettings) -> Result<S> {
    let e = total_loss(inp, settings)?;
    Ok(S::lit(e.breakdown.total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn ce_perfect_and_uniform() {
        let perfect = array![[1.0f64, 0.0], [0.0, 1.0]];
        assert_eq!(cross_entropy(perfect.view(), &[0, 1]).unwrap(), 0.0);
        let u2 = Array2::from_elem((3, 2), 0.5f64);
        assert!((cross_entropy(u2.view(), &[0, 1, 1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let u4 = Array2::from_elem((2, 4), 0.25f64);
        assert!((cross_entropy(u4.view(), &[3, 0]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_is_clamped() {
        let p = array![[1.0f64, 0.0]];
        let v = cross_entropy(p.view(), &[1]).unwrap();
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(v.is_finite());
    }

    #[test]
    fn ce_empty_is_zero() {
        let p = Array2::<f64>::zeros((0, 2));
        assert_eq!(cross_entropy(p.view(), &[]).unwrap(), 0.0);
    }

    #[test]
    fn center_fixtures() {
        let c = Array2::<f64>::zeros((2, 2));
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(center_loss(f.view(), &[0, 0], c.view()).unwrap(), 1.0);
        let f = array![[2.0, 0.0]];
        assert_eq!(center_loss(f.view(), &[1], c.view()).unwrap(), 2.0);
        let at = array![[0.5, -1.0]];
        let centers = array![[0.5, -1.0], [3.0, 3.0]];
        assert_eq!(center_loss(at.view(), &[0], centers.view()).unwrap(), 0.0);
        assert!(center_loss(at.view(), &[2], centers.view()).is_err());
    }

    #[test]
    fn center_grad_closed_form() {
        let f = array![[1.0, 2.0], [3.0, -1.0]];
        let c = array![[0.5, 0.5], [1.0, 1.0]];
        let g = center_loss_grad(f.view(), &[1, 0], c.view()).unwrap();
        assert_eq!(g, array![[0.0, 1.0], [2.5, -1.5]]);
    }

    #[test]
    fn center_update_rules() {
        let c = Array2::<f64>::zeros((2, 2));
        let f = array![[2.0, 0.0], [2.0, 0.0]];
        let half = update_centers(c.view(), f.view(), &[0, 0], 0.5).unwrap();
        assert_eq!(half, array![[1.0, 0.0], [0.0, 0.0]]);
        let full = update_centers(c.view(), array![[1.0, 3.0], [3.0, 1.0]].view(), &[1, 1], 1.0).unwrap();
        assert_eq!(full, array![[0.0, 0.0], [2.0, 2.0]]);
        let none = update_centers(full.view(), f.view(), &[0, 0], 0.0).unwrap();
        assert_eq!(none, full);
    }

    #[test]
    fn mse_fixtures() {
        let d = Array4::<f64>::zeros((1, 1, 1, 2));
        let mut r = d.clone();
        r[[0, 0, 0, 0]] = 1.0;
        r[[0, 0, 0, 1]] = -1.0;
        assert_eq!(mse_recon(d.view(), &[r.view()], &[1.0]).unwrap(), 2.0);
        assert_eq!(mse_recon(d.view(), &[r.view()], &[0.0]).unwrap(), 0.0);
        assert_eq!(mse_recon(d.view(), &[d.view()], &[0.7]).unwrap(), 0.0);
    }

    #[test]
    fn ds_hand_evaluation() {
        let raw = array![[0.0, 0.0], [2.0, 0.0]];
        let lat = array![[0.0], [1.0]];
        let opts = DsOptions {
            normalize: false,
            ..DsOptions::default()
        };
        let (v, _) = ds_loss(raw.view(), &[lat.view()], &[vec![0, 1]], &[1.0], &opts).unwrap();
        assert_eq!(v, 2.0);
        let (single, _) = ds_loss(raw.view(), &[lat.view()], &[vec![0]], &[1.0], &opts).unwrap();
        assert_eq!(single, 0.0);
    }

    #[test]
    fn ds_zero_when_distances_match() {
        let raw: Array2<f64> = array![[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]];
        let lat = raw.clone();
        for normalize in [false, true] {
            let opts = DsOptions {
                normalize,
                ..DsOptions::default()
            };
            let (v, g): (f64, _) = ds_loss(raw.view(), &[lat.view()], &[vec![0, 1, 2]], &[1.0], &opts).unwrap();
            assert!(v.abs() < 1e-24);
            assert!(g[0].iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn breakdown_identities() {
        let b = LossBreakdown::compose(0.7, 2.0, 0.3, 5.0, 1.5, 0.01, 3);
        assert!((b.supervised - 1.3).abs() < 1e-12);
        assert_eq!(b.unsupervised, 6.5);
        assert!((b.total - (6.5 + 1.3 + 0.01)).abs() < 1e-12);
        let m = LossBreakdown::mean(&[b.clone(), b.clone()]);
        assert!((m.total - b.total).abs() < 1e-12);
        let _ = Array1::<f64>::zeros(1);
    }
}
