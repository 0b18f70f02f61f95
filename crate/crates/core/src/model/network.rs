//! The columnar auto-encoder and classifier head: batched forward pass with caches and
//! the matching reverse pass.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::params::{init_params, BnIds, ColumnIds, Layout, LstmIds, ParamStore, DEC_KERNEL};
use crate::data::{validate_config, ModelConfig, UPSAMPLE_COLS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dropout and batch-norm behavior of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout; masks are drawn from `seed`.
    Train { seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

impl Mode {
    fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Clone, Debug)]
pub struct Network<S> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<S>,
}

struct EncoderCache<S> {
    cols: Option<Array2<S>>,
    relu_out: Option<Array2<S>>,
    bn: Option<BnCache<S>>,
    pool: Option<PoolCache>,
    pool_mask: Option<Array2<S>>,
    lstm_masks: Vec<Option<Array2<S>>>,
    lstm: Option<LstmCache<S>>,
}

struct DecoderCache<S> {
    masks: Vec<Option<Array2<S>>>,
    lstm: LstmCache<S>,
    bn_in: BnCache<S>,
    cols: Array2<S>,
    relu_out: Array2<S>,
    bn_out: BnCache<S>,
    mixed_in: Array2<S>,
    grid: (usize, usize),
    rows: Array2<S>,
    cols_resize: Array2<S>,
}

/// Everything one column produced for a batch.
pub struct ColumnPass<S> {
    enc: EncoderCache<S>,
    /// Hidden sequence `h_1 … h_n`, each `(B, d)`.
    pub hidden: Vec<Array2<S>>,
    attn: AttentionOut<S>,
    dec: Option<DecoderCache<S>>,
    /// `(B, n, C, m)` reconstructions when the decoder ran.
    pub recon: Option<Array4<S>>,
}

impl<S: Scalar> ColumnPass<S> {
    /// Attention weights `(B, n)`.
    pub fn alpha(&self) -> &Array2<S> {
        &self.attn.alpha
    }

    /// Latent `v`, `(B, d)`.
    pub fn latent(&self) -> &Array2<S> {
        &self.attn.v
    }
}

pub struct ForwardPass<S> {
    pub mode: Mode,
    pub batch: usize,
    pub windows: usize,
    pub columns: Vec<ColumnPass<S>>,
    /// Concatenated column latents `(B, Σd)`.
    pub concat: Array2<S>,
    /// Hidden classifier layer after ReLU, `(B, fc_hidden)`; the center-loss embedding.
    pub features: Array2<S>,
    pub logits: Array2<S>,
    pub probs: Array2<S>,
    bn_stats: Vec<(BnIds, BnStats<S>)>,
}

/// Loss gradients with respect to the forward outputs. `None` means zero.
pub struct OutputGrads<S> {
    pub recon: Vec<Option<Array4<S>>>,
    pub latent: Vec<Option<Array2<S>>>,
    pub features: Option<Array2<S>>,
    pub logits: Option<Array2<S>>,
}

impl<S: Scalar> OutputGrads<S> {
    pub fn zeros(columns: usize) -> Self {
        OutputGrads {
            recon: (0..columns).map(|_| None).collect(),
            latent: (0..columns).map(|_| None).collect(),
            features: None,
            logits: None,
        }
    }
}

fn bn_refs<'a, S: Scalar>(p: &'a ParamStore<S>, ids: &BnIds) -> BnRefs<'a, S> {
    BnRefs {
        gamma: p.v1(ids.gamma),
        beta: p.v1(ids.beta),
        running_mean: p.v1(ids.mean),
        running_var: p.v1(ids.var),
    }
}

fn lstm_refs<'a, S: Scalar>(p: &'a ParamStore<S>, ids: &LstmIds) -> LstmRefs<'a, S> {
    LstmRefs {
        w: p.v2(ids.w),
        u: p.v2(ids.u),
        b: p.v1(ids.b),
    }
}

fn column_rng(mode: Mode, column: usize, slot: u64) -> Option<ChaCha8Rng> {
    match mode {
        Mode::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(column as u64 * 8 + slot);
            Some(rng)
        }
        Mode::Eval => None,
    }
}

fn masks<S: Scalar>(rng: Option<ChaCha8Rng>, steps: usize, shape: (usize, usize), rate: f64) -> Vec<Option<Array2<S>>> {
    match rng {
        Some(mut rng) => (0..steps).map(|_| dropout_mask(&mut rng, shape, rate)).collect(),
        None => (0..steps).map(|_| None).collect(),
    }
}

/// Rows `b·n + i` for `b in 0..B`.
fn step_rows(batch: usize, n: usize, i: usize) -> Vec<usize> {
    (0..batch).map(|b| b * n + i).collect()
}

impl<S: Scalar> Network<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let violations = validate_config(&cfg);
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::Config(text.join("; ")));
        }
        let (layout, params) = init_params(&cfg, seed);
        Ok(Network {
            cfg,
            layout,
            params,
        })
    }

    pub fn from_parts(cfg: ModelConfig, layout: Layout, params: ParamStore<S>) -> Self {
        Network {
            cfg,
            layout,
            params,
        }
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Runs every column on `(B, n, C, m)` windows, then the classifier on the
    /// concatenated latents. The decoder only runs when `reconstruct` is set.
    pub fn forward(&self, windows: ArrayView4<S>, mode: Mode, reconstruct: bool) -> Result<ForwardPass<S>> {
        let (batch, n, c, m) = windows.dim();
        if c != self.cfg.channel_count || m != self.cfg.window_len {
            return Err(Error::Shape(format!(
                "windows are {c}x{m}, model expects {}x{}",
                self.cfg.channel_count, self.cfg.window_len
            )));
        }
        if batch == 0 || n == 0 {
            return Err(Error::Shape(format!("empty batch ({batch} trials, {n} windows)")));
        }
        let flat = windows
            .to_shape((batch * n, c, m))
            .map_err(|e| Error::Shape(e.to_string()))?
            .into_owned();
        let mut bn_stats = Vec::new();
        let mut columns = Vec::with_capacity(self.cfg.columns.len());
        for (ci, ids) in self.layout.columns.iter().enumerate() {
            let pass = self.column_forward(ci, ids, &flat, batch, n, mode, reconstruct, &mut bn_stats);
            columns.push(pass);
        }
        let views: Vec<ArrayView2<S>> = columns.iter().map(|c| c.attn.v.view()).collect();
        let concat = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let p = &self.params;
        let mut features = linear_forward(concat.view(), p.v2(self.layout.fc1_w), p.v1(self.layout.fc1_b));
        relu_inplace(&mut features);
        let logits = linear_forward(features.view(), p.v2(self.layout.fc2_w), p.v1(self.layout.fc2_b));
        let probs = softmax_rows(logits.view());
        Ok(ForwardPass {
            mode,
            batch,
            windows: n,
            columns,
            concat,
            features,
            logits,
            probs,
            bn_stats,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn column_forward(
        &self,
        ci: usize,
        ids: &ColumnIds,
        flat: &Array3<S>,
        batch: usize,
        n: usize,
        mode: Mode,
        reconstruct: bool,
        bn_stats: &mut Vec<(BnIds, BnStats<S>)>,
    ) -> ColumnPass<S> {
        let p = &self.params;
        let spec = &self.cfg.columns[ci];
        let eps = S::lit(self.cfg.bn_eps);
        let (c, m) = (flat.dim().1, flat.dim().2);
        let train = mode.is_train();

        // per-window features (B·n, I)
        let mut enc = EncoderCache {
            cols: None,
            relu_out: None,
            bn: None,
            pool: None,
            pool_mask: None,
            lstm_masks: Vec::new(),
            lstm: None,
        };
        let feats = match &ids.conv {
            Some(conv) => {
                let cols = im2col_valid(flat.view(), spec.conv_kernel);
                let mut z = linear_forward(cols.view(), p.v2(conv.kernel).t(), p.v1(conv.bias));
                relu_inplace(&mut z);
                let (y, bn_cache, stats) = bn_forward(&bn_refs(p, &conv.bn), z.view(), train, eps);
                if let Some(st) = stats {
                    bn_stats.push((conv.bn, st));
                }
                let (mut q, pool) = maxpool_forward(y.view(), batch * n, spec.pool);
                let mask = column_rng(mode, ci, 0)
                    .and_then(|mut rng| dropout_mask(&mut rng, q.dim(), spec.dropout));
                apply_mask(&mut q, &mask);
                enc.cols = Some(cols);
                enc.relu_out = Some(z);
                enc.bn = Some(bn_cache);
                enc.pool = Some(pool);
                enc.pool_mask = mask;
                q
            }
            None => flat
                .to_shape((batch * n, c * m))
                .expect("contiguous windows")
                .into_owned(),
        };

        let hidden: Vec<Array2<S>> = match &ids.lstm {
            Some(lstm_ids) => {
                let width = feats.ncols();
                enc.lstm_masks = masks(column_rng(mode, ci, 1), n, (batch, width), spec.lstm_dropout);
                let xs: Vec<Array2<S>> = (0..n)
                    .map(|i| {
                        let mut x = feats.select(Axis(0), &step_rows(batch, n, i));
                        apply_mask(&mut x, &enc.lstm_masks[i]);
                        x
                    })
                    .collect();
                let cache = lstm_forward(&lstm_refs(p, lstm_ids), xs);
                let out = cache.outputs().to_vec();
                enc.lstm = Some(cache);
                out
            }
            None => (0..n).map(|i| feats.select(Axis(0), &step_rows(batch, n, i))).collect(),
        };

        let attn = match &ids.attn {
            Some(a) => attention_forward(&hidden, Some(p.v1(a.w)), p.v1(a.b)[0]),
            None => attention_forward(&hidden, None, S::zero()),
        };

        let (dec, recon) = if reconstruct {
            let (cache, recon) = self.decoder_forward(ci, ids, &attn.v, batch, n, (c, m), mode, bn_stats);
            (Some(cache), Some(recon))
        } else {
            (None, None)
        };
        ColumnPass {
            enc,
            hidden,
            attn,
            dec,
            recon,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_forward(
        &self,
        ci: usize,
        ids: &ColumnIds,
        v: &Array2<S>,
        batch: usize,
        n: usize,
        target: (usize, usize),
        mode: Mode,
        bn_stats: &mut Vec<(BnIds, BnStats<S>)>,
    ) -> (DecoderCache<S>, Array4<S>) {
        let p = &self.params;
        let spec = &self.cfg.columns[ci];
        let dec = &ids.dec;
        let eps = S::lit(self.cfg.bn_eps);
        let train = mode.is_train();
        let d = v.ncols();

        // the latent is fed at every one of the n steps
        let step_masks = masks(column_rng(mode, ci, 2), n, (batch, d), spec.dec_lstm_dropout);
        let xs: Vec<Array2<S>> = step_masks
            .iter()
            .map(|mask| {
                let mut x = v.clone();
                apply_mask(&mut x, mask);
                x
            })
            .collect();
        let lstm = lstm_forward(&lstm_refs(p, &dec.lstm), xs);

        let (rows, cols) = (spec.dec_rows, spec.dec_cols);
        let mut small = Array3::zeros((batch * n, rows, cols));
        for (t, h) in lstm.outputs().iter().enumerate() {
            for b in 0..batch {
                let img = h.row(b).to_shape((rows, cols)).expect("reshape").into_owned();
                small.index_axis_mut(Axis(0), b * n + t).assign(&img);
            }
        }
        let up = upsample_nearest(small.view(), self.cfg.upsample_rows, UPSAMPLE_COLS);
        let (imgs, gh, gw) = up.dim();
        let up_flat = up.to_shape((imgs * gh * gw, 1)).expect("flatten").into_owned();
        let (normed, bn_in, st) = bn_forward(&bn_refs(p, &dec.bn_in), up_flat.view(), train, eps);
        if let Some(st) = st {
            bn_stats.push((dec.bn_in, st));
        }
        let normed = normed.into_shape_with_order((imgs, gh, gw)).expect("unflatten");
        let conv_cols = im2col_same(normed.view(), DEC_KERNEL);
        let mut z = linear_forward(conv_cols.view(), p.v2(dec.kernel).t(), p.v1(dec.bias));
        relu_inplace(&mut z);
        let (y, bn_out, st) = bn_forward(&bn_refs(p, &dec.bn_out), z.view(), train, eps);
        if let Some(st) = st {
            bn_stats.push((dec.bn_out, st));
        }
        // The 1×1 convolution mixes channels and the bilinear resize acts on each channel
        // with rows summing to one, so the two commute; mixing first is much cheaper.
        let mixed = y.dot(&p.v1(dec.out_w)).mapv(|v| v + p.v1(dec.out_b)[0]);
        let mixed = mixed.into_shape_with_order((imgs, gh, gw)).expect("unflatten");
        let (c, m) = target;
        let rmat = bilinear_matrix::<S>(gh, c);
        let cmat = bilinear_matrix::<S>(gw, m);
        let out = resize(mixed.view(), rmat.view(), cmat.view());
        let recon = out.into_shape_with_order((batch, n, c, m)).expect("recon shape");
        (
            DecoderCache {
                masks: step_masks,
                lstm,
                bn_in,
                cols: conv_cols,
                relu_out: z,
                bn_out,
                mixed_in: y,
                grid: (gh, gw),
                rows: rmat,
                cols_resize: cmat,
            },
            recon,
        )
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<S>) {
        let mom = S::lit(self.cfg.bn_momentum);
        for (ids, st) in &pass.bn_stats {
            let mut rm = self.params.m1(ids.mean);
            rm.zip_mut_with(&st.mean, |r, &b| *r = mom * *r + (S::one() - mom) * b);
            let mut rv = self.params.m1(ids.var);
            rv.zip_mut_with(&st.var, |r, &b| *r = mom * *r + (S::one() - mom) * b);
        }
    }

    /// Gradient of the loss with respect to every parameter entry. Non-trainable
    /// entries receive zeros.
    pub fn backward(&self, pass: &ForwardPass<S>, grads: &OutputGrads<S>) -> Result<ParamStore<S>> {
        let p = &self.params;
        let lay = &self.layout;
        let mut g = p.zeros_like();
        let batch = pass.batch;

        // classifier
        let hdim = self.cfg.fc_hidden;
        let mut dfeat = match &grads.features {
            Some(d) => d.clone(),
            None => Array2::zeros((batch, hdim)),
        };
        if let Some(dlogits) = &grads.logits {
            g.accumulate(lay.fc2_w, &pass.features.t().dot(dlogits));
            g.accumulate(lay.fc2_b, &dlogits.sum_axis(Axis(0)));
            dfeat += &dlogits.dot(&p.v2(lay.fc2_w).t());
        }
        relu_backward_inplace(&mut dfeat, pass.features.view());
        g.accumulate(lay.fc1_w, &pass.concat.t().dot(&dfeat));
        g.accumulate(lay.fc1_b, &dfeat.sum_axis(Axis(0)));
        let dconcat = dfeat.dot(&p.v2(lay.fc1_w).t());

        let mut offset = 0;
        for (ci, (ids, col)) in lay.columns.iter().zip(&pass.columns).enumerate() {
            let d = col.attn.v.ncols();
            let mut dv = dconcat.slice(s![.., offset..offset + d]).to_owned();
            offset += d;
            if let Some(extra) = grads.latent.get(ci).and_then(Option::as_ref) {
                dv += extra;
            }
            if let (Some(drecon), Some(cache)) = (grads.recon.get(ci).and_then(Option::as_ref), &col.dec) {
                dv += &self.decoder_backward(ci, ids, cache, pass, drecon, &mut g);
            }
            self.encoder_backward(ci, ids, col, pass, dv.view(), &mut g);
        }
        Ok(g)
    }

    fn decoder_backward(
        &self,
        ci: usize,
        ids: &ColumnIds,
        cache: &DecoderCache<S>,
        pass: &ForwardPass<S>,
        drecon: &Array4<S>,
        g: &mut ParamStore<S>,
    ) -> Array2<S> {
        let p = &self.params;
        let dec = &ids.dec;
        let spec = &self.cfg.columns[ci];
        let (batch, n) = (pass.batch, pass.windows);
        let imgs = batch * n;
        let (gh, gw) = cache.grid;
        let (_, _, c, m) = drecon.dim();
        let dout = drecon.to_shape((imgs, c, m)).expect("recon grad").into_owned();
        let dmixed = resize_backward(dout.view(), cache.rows.view(), cache.cols_resize.view());
        let dmixed = dmixed.into_shape_with_order(imgs * gh * gw).expect("flatten");
        g.accumulate(dec.out_w, &cache.mixed_in.t().dot(&dmixed));
        g.accumulate(dec.out_b, &Array1::from_elem(1, dmixed.sum()));
        let w = p.v1(dec.out_w);
        let dy = Array2::from_shape_fn((imgs * gh * gw, w.len()), |(r, f)| dmixed[r] * w[f]);
        let (mut dz, dgamma, dbeta) = bn_backward(p.v1(dec.bn_out.gamma), &cache.bn_out, dy.view());
        g.accumulate(dec.bn_out.gamma, &dgamma);
        g.accumulate(dec.bn_out.beta, &dbeta);
        relu_backward_inplace(&mut dz, cache.relu_out.view());
        g.accumulate(dec.kernel, &dz.t().dot(&cache.cols));
        g.accumulate(dec.bias, &dz.sum_axis(Axis(0)));
        let dcols = dz.dot(&p.v2(dec.kernel));
        let dnormed = col2im_same(dcols.view(), (imgs, gh, gw), DEC_KERNEL);
        let dn_flat = dnormed.into_shape_with_order((imgs * gh * gw, 1)).expect("flatten");
        let (dup, dgamma, dbeta) = bn_backward(p.v1(dec.bn_in.gamma), &cache.bn_in, dn_flat.view());
        g.accumulate(dec.bn_in.gamma, &dgamma);
        g.accumulate(dec.bn_in.beta, &dbeta);
        let dup = dup.into_shape_with_order((imgs, gh, gw)).expect("unflatten");
        let dsmall = upsample_nearest_backward(dup.view(), self.cfg.upsample_rows, UPSAMPLE_COLS);
        let units = spec.dec_rows * spec.dec_cols;
        let dh: Vec<Array2<S>> = (0..n)
            .map(|t| {
                let mut out = Array2::zeros((batch, units));
                for b in 0..batch {
                    let img = dsmall.index_axis(Axis(0), b * n + t);
                    out.row_mut(b).assign(&img.to_shape(units).expect("flatten"));
                }
                out
            })
            .collect();
        let lg = lstm_backward(&lstm_refs(p, &dec.lstm), &cache.lstm, &dh);
        g.accumulate(dec.lstm.w, &lg.dw);
        g.accumulate(dec.lstm.u, &lg.du);
        g.accumulate(dec.lstm.b, &lg.db);
        let mut dv = Array2::zeros(pass.columns[ci].attn.v.raw_dim());
        for (mut dx, mask) in lg.dxs.into_iter().zip(&cache.masks) {
            apply_mask(&mut dx, mask);
            dv += &dx;
        }
        dv
    }

    fn encoder_backward(
        &self,
        ci: usize,
        ids: &ColumnIds,
        col: &ColumnPass<S>,
        pass: &ForwardPass<S>,
        dv: ArrayView2<S>,
        g: &mut ParamStore<S>,
    ) {
        let p = &self.params;
        let spec = &self.cfg.columns[ci];
        let (batch, n) = (pass.batch, pass.windows);
        let attn_w = ids.attn.as_ref().map(|a| p.v1(a.w));
        let ag = attention_backward(&col.hidden, attn_w, &col.attn, dv);
        if let (Some(a), Some(dw)) = (&ids.attn, &ag.dw) {
            g.accumulate(a.w, dw);
            g.accumulate(a.b, &Array1::from_elem(1, ag.db));
        }
        let dfeat_steps: Vec<Array2<S>> = match (&ids.lstm, &col.enc.lstm) {
            (Some(lstm_ids), Some(cache)) => {
                let lg = lstm_backward(&lstm_refs(p, lstm_ids), cache, &ag.dhs);
                g.accumulate(lstm_ids.w, &lg.dw);
                g.accumulate(lstm_ids.u, &lg.du);
                g.accumulate(lstm_ids.b, &lg.db);
                lg.dxs
                    .into_iter()
                    .zip(&col.enc.lstm_masks)
                    .map(|(mut dx, mask)| {
                        apply_mask(&mut dx, mask);
                        dx
                    })
                    .collect()
            }
            _ => ag.dhs,
        };
        let Some(conv) = &ids.conv else {
            return;
        };
        let width = dfeat_steps[0].ncols();
        let mut dq = Array2::zeros((batch * n, width));
        for (i, d) in dfeat_steps.iter().enumerate() {
            for b in 0..batch {
                dq.row_mut(b * n + i).assign(&d.row(b));
            }
        }
        apply_mask(&mut dq, &col.enc.pool_mask);
        let pool = col.enc.pool.as_ref().expect("pool cache");
        let dy = maxpool_backward(pool, dq.view(), spec.conv_filters);
        let bn = col.enc.bn.as_ref().expect("bn cache");
        let (mut dz, dgamma, dbeta) = bn_backward(p.v1(conv.bn.gamma), bn, dy.view());
        g.accumulate(conv.bn.gamma, &dgamma);
        g.accumulate(conv.bn.beta, &dbeta);
        relu_backward_inplace(&mut dz, col.enc.relu_out.as_ref().expect("conv output").view());
        let cols = col.enc.cols.as_ref().expect("im2col cache");
        g.accumulate(conv.kernel, &dz.t().dot(cols));
        g.accumulate(conv.bias, &dz.sum_axis(Axis(0)));
    }
}
