use ndarray::{array, s, Array2, Array4, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cstae::data::{ModelConfig, Trial};
use cstae::model::layers::{attention_forward, softmax_rows};
use cstae::model::{init_params, Mode, Network, DEC_KERNEL};
use cstae::windowing::stack_windows;

fn assert_close<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>, eps: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= eps, "{x} vs {y}");
    }
}

/// Valid convolution then non-overlapping pooling, computed from scratch.
fn flat_width_oracle(m: usize, kernel: usize, pool: usize, filters: usize) -> usize {
    let conv = m - kernel + 1;
    (conv / pool) * filters
}

#[test]
fn encoder_widths_follow_convolution_arithmetic() {
    let cfg = ModelConfig::physionet();
    let widths: Vec<usize> = (0..3).map(|i| cfg.feature_width(i)).collect();
    assert_eq!(widths[0], 256);
    assert_eq!(widths[2], 330);
    for (i, col) in cfg.columns.iter().enumerate() {
        assert_eq!(widths[i], flat_width_oracle(400, col.conv_kernel, col.pool, col.conv_filters));
    }
    assert_eq!(cfg.columns[0].conv_len(400), 351);
    assert_eq!(cfg.columns[2].conv_len(400), 386);
    assert_eq!(cfg.concat_width(), 64 + 40 + 30);
}

#[test]
fn decoder_grids_before_reconciliation() {
    assert_eq!(ModelConfig::physionet().decoder_grid(0), (8, 200));
    assert_eq!(ModelConfig::bci_iv_2a().decoder_grid(2), (4, 60));
}

fn random_trials(cfg: &ModelConfig, batch: usize, samples: usize, seed: u64) -> Vec<Trial<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|b| {
            let data = Array2::from_shape_fn((cfg.channel_count, samples), |_| rng.random_range(-20.0..20.0));
            Trial::new("S1", format!("S1/0/{b}"), data, Some(b % cfg.class_count), cfg.class_count).unwrap()
        })
        .collect()
}

fn windows_of(cfg: &ModelConfig, trials: &[Trial<f64>]) -> Array4<f64> {
    let refs: Vec<&Trial<f64>> = trials.iter().collect();
    stack_windows(&refs, cfg.window_len, cfg.step).unwrap()
}

#[test]
fn physionet_forward_shapes() {
    let cfg = ModelConfig::physionet();
    let net = Network::<f64>::new(cfg.clone(), 1).unwrap();
    let trials = random_trials(&cfg, 2, 496, 3);
    let x = windows_of(&cfg, &trials);
    assert_eq!(x.dim(), (2, 5, 64, 400));
    let pass = net.forward(x.view(), Mode::Eval, true).unwrap();
    assert_eq!(pass.concat.dim(), (2, 134));
    assert_eq!(pass.probs.dim(), (2, 2));
    for col in &pass.columns {
        assert_eq!(col.recon.as_ref().unwrap().dim(), (2, 5, 64, 400));
        assert_eq!(col.alpha().dim(), (2, 5));
    }
}

#[test]
fn desk_reconstructions_match_windows_for_any_length() {
    let cfg = ModelConfig::desk();
    let net = Network::<f64>::new(cfg.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let t = rng.random_range(cfg.window_len..cfg.window_len + 5 * cfg.step);
        let x = windows_of(&cfg, &random_trials(&cfg, 3, t, t as u64));
        let pass = net.forward(x.view(), Mode::Eval, true).unwrap();
        for col in &pass.columns {
            assert_eq!(col.recon.as_ref().unwrap().dim(), x.dim(), "T={t}");
        }
    }
}

/// Parameter count from the layer list alone.
fn parameter_oracle(cfg: &ModelConfig) -> (usize, usize) {
    let lstm = |input: usize, h: usize| 4 * h * (input + h + 1);
    let (mut trainable, mut running) = (0, 0);
    let c = cfg.channel_count;
    for col in &cfg.columns {
        let f = col.conv_filters;
        let flat = (cfg.window_len - col.conv_kernel + 1) / col.pool * f;
        let d = col.lstm_units;
        trainable += f * c * col.conv_kernel + f + 2 * f;
        running += 2 * f;
        trainable += lstm(flat, d);
        trainable += d + 1;
        let fd = col.dec_filters;
        trainable += lstm(d, col.dec_lstm_units);
        trainable += 2;
        running += 2;
        trainable += fd * DEC_KERNEL * DEC_KERNEL + fd + 2 * fd;
        running += 2 * fd;
        trainable += fd + 1;
    }
    let concat: usize = cfg.columns.iter().map(|col| col.lstm_units).sum();
    let (h, k) = (cfg.fc_hidden, cfg.class_count);
    trainable += concat * h + h + h * k + k;
    running += k * h;
    (trainable, running)
}

#[test]
fn parameter_counts_match_oracle() {
    for cfg in [ModelConfig::physionet(), ModelConfig::bci_iv_2a(), ModelConfig::desk()] {
        let (_, params) = init_params::<f32>(&cfg, 0);
        let (trainable, running) = parameter_oracle(&cfg);
        assert_eq!(params.trainable_count(), trainable);
        assert_eq!(params.total_count(), trainable + running);
    }
}

#[test]
fn initialization_is_seeded() {
    let cfg = ModelConfig::desk();
    let a = Network::<f32>::new(cfg.clone(), 5).unwrap();
    let b = Network::<f32>::new(cfg.clone(), 5).unwrap();
    let c = Network::<f32>::new(cfg, 6).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn attention_closed_forms() {
    let h = array![[1.0, -2.0], [3.0, 0.5]];
    let hs = vec![h.clone(), h.clone(), h.clone(), h.clone()];
    let out = attention_forward(&hs, Some(array![0.3, -0.7].view()), 0.1);
    assert!(out.alpha.iter().all(|&a| a == 0.25));
    assert_close(&out.v, &h, 1e-15);

    let single = attention_forward(&[h.clone()], Some(array![1.0, 1.0].view()), 0.0);
    assert!(single.alpha.iter().all(|&a| a == 1.0));
    assert_eq!(single.v, h);

    // one-dimensional hidden states with unit weight give scores (0, ln 3)
    let hs = vec![array![[0.0]], array![[3f64.ln()]]];
    let out = attention_forward(&hs, Some(array![1.0].view()), 0.0);
    assert_close(&out.alpha, &array![[0.25, 0.75]], 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn attention_weights_are_a_distribution(seed in any::<u64>(), n in 1usize..12, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hs: Vec<Array2<f64>> = (0..n)
            .map(|_| Array2::from_shape_fn((3, d), |_| rng.random_range(-5.0..5.0)))
            .collect();
        let w = ndarray::Array1::from_shape_fn(d, |_| rng.random_range(-3.0..3.0));
        let out = attention_forward(&hs, Some(w.view()), rng.random_range(-1.0..1.0));
        for (b, row) in out.alpha.axis_iter(Axis(0)).enumerate() {
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            for j in 0..d {
                let vals: Vec<f64> = hs.iter().map(|h| h[[b, j]]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.v[[b, j]] >= lo - 1e-12 && out.v[[b, j]] <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn classifier_softmax_closed_forms() {
    let p = softmax_rows(array![[9f64.ln(), 0.0], [0.0, 0.0]].view());
    assert_close(&p, &array![[0.9, 0.1], [0.5, 0.5]], 1e-15);
    let p = softmax_rows(Array2::<f64>::zeros((1, 4)).view());
    assert!(p.iter().all(|&v| v == 0.25));
}

#[test]
fn zero_input_gives_zero_latents() {
    let cfg = ModelConfig::desk();
    let net = Network::<f64>::new(cfg.clone(), 4).unwrap();
    let x = Array4::<f64>::zeros((2, 3, cfg.channel_count, cfg.window_len));
    let pass = net.forward(x.view(), Mode::Eval, false).unwrap();
    assert!(pass.concat.iter().all(|&v| v == 0.0));
}

#[test]
fn eval_forward_is_deterministic_and_batch_equivariant() {
    let cfg = ModelConfig::desk();
    let net = Network::<f64>::new(cfg.clone(), 11).unwrap();
    let trials = random_trials(&cfg, 5, 112, 12);
    let x = windows_of(&cfg, &trials);
    let a = net.forward(x.view(), Mode::Eval, true).unwrap();
    let b = net.forward(x.view(), Mode::Eval, true).unwrap();
    assert_eq!(a.probs, b.probs);
    assert_eq!(a.concat, b.concat);

    let perm = [3usize, 0, 4, 1, 2];
    let xp = x.select(Axis(0), &perm);
    let c = net.forward(xp.view(), Mode::Eval, true).unwrap();
    assert_close(&c.probs, &a.probs.select(Axis(0), &perm), 1e-12);
    assert_close(&c.concat, &a.concat.select(Axis(0), &perm), 1e-12);
    for (ca, cc) in a.columns.iter().zip(&c.columns) {
        let ra = ca.recon.as_ref().unwrap().select(Axis(0), &perm);
        assert_close(cc.recon.as_ref().unwrap(), &ra, 1e-9);
        assert_close(cc.alpha(), &ca.alpha().select(Axis(0), &perm), 1e-12);
    }
}

#[test]
fn train_mode_without_dropout_ignores_the_mask_seed() {
    let mut cfg = ModelConfig::desk();
    for col in &mut cfg.columns {
        col.dropout = 0.0;
        col.lstm_dropout = 0.0;
        col.dec_lstm_dropout = 0.0;
    }
    let net = Network::<f64>::new(cfg.clone(), 1).unwrap();
    let x = windows_of(&cfg, &random_trials(&cfg, 4, 96, 2));
    let a = net.forward(x.view(), Mode::Train { seed: 1 }, true).unwrap();
    let b = net.forward(x.view(), Mode::Train { seed: 2 }, true).unwrap();
    assert_eq!(a.probs, b.probs);
    assert_eq!(a.columns[0].recon, b.columns[0].recon);

    // with dropout on, the seed matters and is reproducible
    let net = Network::<f64>::new(ModelConfig::desk(), 1).unwrap();
    let a = net.forward(x.view(), Mode::Train { seed: 1 }, false).unwrap();
    let b = net.forward(x.view(), Mode::Train { seed: 1 }, false).unwrap();
    let c = net.forward(x.view(), Mode::Train { seed: 2 }, false).unwrap();
    assert_eq!(a.probs, b.probs);
    assert_ne!(a.probs, c.probs);
}

#[test]
fn single_window_yields_one_reconstruction() {
    let cfg = ModelConfig::desk();
    let net = Network::<f64>::new(cfg.clone(), 3).unwrap();
    let x = windows_of(&cfg, &random_trials(&cfg, 2, cfg.window_len, 1));
    assert_eq!(x.dim().1, 1);
    let pass = net.forward(x.view(), Mode::Eval, true).unwrap();
    assert!(pass.columns[0].alpha().iter().all(|&a| a == 1.0));
    let recon = pass.columns[0].recon.as_ref().unwrap();
    assert_eq!(recon.slice(s![.., .., .., ..]).dim(), (2, 1, cfg.channel_count, cfg.window_len));
}
