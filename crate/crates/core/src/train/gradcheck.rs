//! Central finite differences against the analytic reverse pass.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use crate::data::{LossWeights, ModelConfig, Trial};
use crate::error::{Error, Result};
use crate::losses::{mse_recon, mse_recon_grad, total_loss, DsOptions, LossInputs, LossSettings};
use crate::model::{ForwardPass, Mode, Network, OutputGrads, ParamStore};

/// Which scalar objective to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSelector {
    Ce,
    Center,
    Mse,
    Ds,
    Total,
    /// Sum of every network output (logits, latents, reconstructions).
    OutputSum,
}

impl LossSelector {
    pub const ALL: [LossSelector; 6] = [
        LossSelector::Ce,
        LossSelector::Center,
        LossSelector::Mse,
        LossSelector::Ds,
        LossSelector::Total,
        LossSelector::OutputSum,
    ];
}

impl fmt::Display for LossSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossSelector::Ce => "ce",
            LossSelector::Center => "center",
            LossSelector::Mse => "mse",
            LossSelector::Ds => "ds",
            LossSelector::Total => "total",
            LossSelector::OutputSum => "output-sum",
        })
    }
}

impl FromStr for LossSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossSelector::ALL
            .into_iter()
            .find(|l| l.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss selector {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Trials in the probe batch; the first `labeled` carry labels.
    pub batch: usize,
    pub labeled: usize,
    /// Windows per trial.
    pub windows: usize,
    /// Check at most this many elements of each tensor (sampled); `None` checks all.
    pub max_per_tensor: Option<usize>,
    pub weights: LossWeights,
    pub l2_factor: f64,
    pub ds: DsOptions,
}

impl GradCheckOptions {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let columns = cfg.columns.len();
        GradCheckOptions {
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 7,
            batch: 5,
            labeled: 3,
            windows: 3,
            max_per_tensor: None,
            weights: LossWeights::uniform(columns, 0.2, 0.1, 0.3),
            l2_factor: cfg.l2_factor,
            ds: DsOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub selector: LossSelector,
    pub eps: f64,
    pub tolerance: f64,
    /// Norms below `floor` are measured against it instead of their own size.
    pub floor: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Random probe batch: `batch` trials of `C × T` standard-normal samples, with `T` chosen so
/// that each trial yields `windows` windows.
pub fn probe_trials(cfg: &ModelConfig, batch: usize, windows: usize, seed: u64) -> Vec<Trial<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.window_len + cfg.step * windows.saturating_sub(1);
    (0..batch)
        .map(|i| {
            let data = Array2::from_shape_simple_fn((cfg.channel_count, t), || rng.sample(StandardNormal));
            Trial::new("probe", format!("probe/{i}"), data, Some(i % cfg.class_count), cfg.class_count)
                .expect("valid probe trial")
        })
        .collect()
}

struct Probe {
    batch: Batch<f64>,
    settings: LossSettings,
    selector: LossSelector,
    mode: Mode,
}

impl Probe {
    fn weights(selector: LossSelector, opts: &GradCheckOptions) -> LossSettings {
        let mut w = opts.weights.clone();
        let mut l2 = opts.l2_factor;
        let zero = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = 0.0);
        match selector {
            LossSelector::Ce | LossSelector::OutputSum => {
                zero(&mut w.beta);
                zero(&mut w.eta);
                w.gamma = 0.0;
                l2 = 0.0;
            }
            LossSelector::Center => {
                zero(&mut w.beta);
                zero(&mut w.eta);
                w.gamma = 1.0;
                l2 = 0.0;
            }
            LossSelector::Mse => {
                zero(&mut w.eta);
                w.gamma = 0.0;
                l2 = 0.0;
            }
            LossSelector::Ds => {
                zero(&mut w.beta);
                w.gamma = 0.0;
                l2 = 0.0;
            }
            LossSelector::Total => {}
        }
        LossSettings {
            weights: w,
            l2_factor: l2,
            ds: opts.ds.clone(),
        }
    }

    fn needs_recon(&self) -> bool {
        match self.selector {
            LossSelector::OutputSum => true,
            _ => self.settings.weights.beta.iter().any(|&b| b != 0.0),
        }
    }

    /// Value and output gradients (plus the direct fc2 gradient) for the selected objective.
    fn evaluate(&self, net: &Network<f64>) -> Result<(f64, Option<(ForwardPass<f64>, OutputGrads<f64>, Array2<f64>)>)> {
        let pass = net.forward(self.batch.windows.view(), self.mode, self.needs_recon())?;
        if self.selector == LossSelector::OutputSum {
            let mut value = pass.logits.sum();
            let mut grads = OutputGrads::zeros(pass.columns.len());
            grads.logits = Some(Array2::ones(pass.logits.raw_dim()));
            for (i, col) in pass.columns.iter().enumerate() {
                value += col.latent().sum();
                grads.latent[i] = Some(Array2::ones(col.latent().raw_dim()));
                if let Some(r) = &col.recon {
                    value += r.sum();
                    grads.recon[i] = Some(Array4::ones(r.raw_dim()));
                }
            }
            let fc2 = Array2::zeros(net.params.v2(net.layout.fc2_w).raw_dim());
            return Ok((value, Some((pass, grads, fc2))));
        }
        let centers = net.params.v2(net.layout.centers);
        let fc2_w = net.params.v2(net.layout.fc2_w);
        let inputs = LossInputs {
            pass: &pass,
            windows: self.batch.windows.view(),
            raw: self.batch.raw.view(),
            labels: &self.batch.labels,
            centers,
            fc2_w,
        };
        let eval = total_loss(&inputs, &self.settings)?;
        let b = &eval.breakdown;
        let value = match self.selector {
            LossSelector::Ce => b.ce,
            LossSelector::Center => b.center,
            LossSelector::Mse => b.mse,
            LossSelector::Ds => b.ds,
            LossSelector::Total | LossSelector::OutputSum => b.total,
        };
        let mut grads = eval.grads;
        // the cross-entropy gradient is always present when labels are; keep only the
        // selected term
        match self.selector {
            LossSelector::Center => grads.logits = None,
            LossSelector::Mse | LossSelector::Ds => {
                grads.logits = None;
                grads.features = None;
            }
            _ => {}
        }
        let fc2 = eval.fc2_w_grad;
        Ok((value, Some((pass, grads, fc2))))
    }
}

/// Checks the analytic gradient of `selector` on a freshly initialized float64 network
/// against central differences, tensor by tensor. Class centers are randomized so the
/// center term has a nontrivial gradient.
pub fn grad_check(cfg: &ModelConfig, selector: LossSelector, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !opts.eps.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate step eps={}", opts.eps)));
    }
    let mut net = Network::<f64>::new(cfg.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    net.params
        .get_mut(net.layout.centers)
        .mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal) * 0.5);
    let trials = probe_trials(cfg, opts.batch, opts.windows, opts.seed.wrapping_add(1));
    let refs: Vec<&Trial<f64>> = trials.iter().collect();
    let flags: Vec<bool> = (0..trials.len()).map(|i| i < opts.labeled).collect();
    let probe = Probe {
        batch: Batch::build(&refs, &flags, cfg.window_len, cfg.step)?,
        settings: Probe::weights(selector, opts),
        selector,
        mode: Mode::Train { seed: opts.seed },
    };
    let (_, out) = probe.evaluate(&net)?;
    let (pass, grads, fc2_grad) = out.expect("gradients requested");
    let mut analytic: ParamStore<f64> = net.backward(&pass, &grads)?;
    if selector != LossSelector::OutputSum {
        analytic.accumulate(net.layout.fc2_w, &fc2_grad);
    }
    drop(pass);

    let mut tensors = Vec::new();
    let mut samples: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for id in 0..net.params.len() {
        let entry = &net.params.entries()[id];
        if !entry.trainable {
            continue;
        }
        let name = entry.name.clone();
        let size = entry.value.len();
        let picks: Vec<usize> = match opts.max_per_tensor {
            Some(k) if k < size => {
                let mut v = sample(&mut rng, size, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..size).collect(),
        };
        let a_flat: Vec<f64> = analytic.get(id).iter().copied().collect();
        let mut a = Vec::with_capacity(picks.len());
        let mut n = Vec::with_capacity(picks.len());
        for &k in &picks {
            let orig = flat_get(net.params.get(id), k);
            flat_set(net.params.get_mut(id), k, orig + opts.eps);
            let (plus, _) = probe.evaluate(&net)?;
            flat_set(net.params.get_mut(id), k, orig - opts.eps);
            let (minus, _) = probe.evaluate(&net)?;
            flat_set(net.params.get_mut(id), k, orig);
            n.push((plus - minus) / (2.0 * opts.eps));
            a.push(a_flat[k]);
        }
        samples.push((name, a, n));
    }
    let scale = samples
        .iter()
        .map(|(_, a, n)| norm(a).max(norm(n)))
        .fold(0.0, f64::max);
    let floor = (scale * 1e-4).max(1e-12);
    let mut max_rel_error: f64 = 0.0;
    for (name, a, n) in samples {
        let rel = relative_error(&a, &n, floor);
        max_rel_error = max_rel_error.max(rel);
        tensors.push(TensorCheck {
            name,
            checked: a.len(),
            analytic_norm: norm(&a),
            numeric_norm: norm(&n),
            rel_error: rel,
        });
    }
    Ok(GradCheckReport {
        selector,
        eps: opts.eps,
        tolerance: opts.tolerance,
        floor,
        tensors,
        max_rel_error,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn flat_get(a: &ArrayD<f64>, k: usize) -> f64 {
    *a.iter().nth(k).expect("index in range")
}

fn flat_set(a: &mut ArrayD<f64>, k: usize, v: f64) {
    *a.iter_mut().nth(k).expect("index in range") = v;
}

/// Gradient check of a purely linear map `y = W x + b` under the squared-error
/// reconstruction loss. The objective is quadratic, so central differences are exact up
/// to rounding.
pub fn grad_check_linear_toy(eps: f64, seed: u64) -> Result<f64> {
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate step eps={eps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inp, out, rows) = (4, 3, 6);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let x = Array2::from_shape_simple_fn((rows, inp), &mut normal);
    let target = Array2::from_shape_simple_fn((rows, out), &mut normal);
    let mut w = Array2::from_shape_simple_fn((inp, out), &mut normal);
    let mut b = Array2::from_shape_simple_fn((1, out), &mut normal);
    let as4 = |a: Array2<f64>| a.insert_axis(Axis(0)).insert_axis(Axis(0));
    let loss = |w: &Array2<f64>, b: &Array2<f64>| -> Result<f64> {
        let y = x.dot(w) + b;
        mse_recon(as4(target.clone()).view(), &[as4(y).view()], &[1.0])
    };
    let y = x.dot(&w) + &b;
    let dy = mse_recon_grad(as4(target.clone()).view(), &[as4(y).view()], &[1.0])?
        .remove(0)
        .into_shape_with_order((rows, out))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let dw = x.t().dot(&dy);
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut analytic = dw.iter().copied().collect::<Vec<_>>();
    analytic.extend(db.iter().copied());
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..w.len() {
        let orig = w.as_slice().unwrap()[k];
        w.as_slice_mut().unwrap()[k] = orig + eps;
        let p = loss(&w, &b)?;
        w.as_slice_mut().unwrap()[k] = orig - eps;
        let m = loss(&w, &b)?;
        w.as_slice_mut().unwrap()[k] = orig;
        numeric.push((p - m) / (2.0 * eps));
    }
    for k in 0..b.len() {
        let orig = b.as_slice().unwrap()[k];
        b.as_slice_mut().unwrap()[k] = orig + eps;
        let p = loss(&w, &b)?;
        b.as_slice_mut().unwrap()[k] = orig - eps;
        let m = loss(&w, &b)?;
        b.as_slice_mut().unwrap()[k] = orig;
        numeric.push((p - m) / (2.0 * eps));
    }
    Ok(relative_error(&analytic, &numeric, 1e-12))
}
