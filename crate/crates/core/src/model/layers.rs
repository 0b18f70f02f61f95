//! Layer primitives with explicit forward caches and hand-written backward passes.
//!
//! Matrices are row-major `ndarray` arrays; a "batch of rows" is always axis 0.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Row-wise normalized exponential with max subtraction.
pub fn softmax_rows<S: Scalar>(z: ArrayView2<S>) -> Array2<S> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(S::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Vector-Jacobian product of the row-wise softmax.
pub fn softmax_rows_backward<S: Scalar>(probs: ArrayView2<S>, dprobs: ArrayView2<S>) -> Array2<S> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, dp), mut o) in probs.rows().into_iter().zip(dprobs.rows()).zip(out.rows_mut()) {
        let dot = p.dot(&dp);
        Zip::from(&mut o).and(&p).and(&dp).for_each(|o, &p, &dp| *o = p * (dp - dot));
    }
    out
}

pub fn relu_inplace<S: Scalar>(x: &mut Array2<S>) {
    x.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<S: Scalar>(grad: &mut Array2<S>, out: ArrayView2<S>) {
    Zip::from(grad).and(&out).for_each(|g, &o| {
        if o <= S::zero() {
            *g = S::zero()
        }
    });
}

/// Inverted dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize),
    rate: f64,
) -> Option<Array2<S>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let scale = S::lit(1.0 / keep);
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            S::zero()
        }
    }))
}

pub fn apply_mask<S: Scalar>(x: &mut Array2<S>, mask: &Option<Array2<S>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

// ---------------------------------------------------------------------------
// batch normalization over rows, one statistic per column

pub struct BnCache<S> {
    pub xhat: Array2<S>,
    pub inv_std: Array1<S>,
    pub train: bool,
}

#[derive(Clone, Debug)]
pub struct BnStats<S> {
    pub mean: Array1<S>,
    pub var: Array1<S>,
}

pub struct BnRefs<'a, S> {
    pub gamma: ArrayView1<'a, S>,
    pub beta: ArrayView1<'a, S>,
    pub running_mean: ArrayView1<'a, S>,
    pub running_var: ArrayView1<'a, S>,
}

pub fn bn_forward<S: Scalar>(
    p: &BnRefs<'_, S>,
    x: ArrayView2<S>,
    train: bool,
    eps: S,
) -> (Array2<S>, BnCache<S>, Option<BnStats<S>>) {
    let (mean, var, stats) = if train {
        let n = S::lit(x.nrows() as f64);
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let stats = BnStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        (mean, var, Some(stats))
    } else {
        (p.running_mean.to_owned(), p.running_var.to_owned(), None)
    };
    let inv_std = var.mapv(|v| S::one() / (v + eps).sqrt());
    let xhat = (&x - &mean) * &inv_std;
    let y = &xhat * &p.gamma + &p.beta;
    (
        y,
        BnCache {
            xhat,
            inv_std,
            train,
        },
        stats,
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward<S: Scalar>(
    gamma: ArrayView1<S>,
    cache: &BnCache<S>,
    dy: ArrayView2<S>,
) -> (Array2<S>, Array1<S>, Array1<S>) {
    let dbeta = dy.sum_axis(Axis(0));
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let dx = if cache.train {
        let n = S::lit(dy.nrows() as f64);
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dx = &dxhat * n - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
        dx *= &(&cache.inv_std / n);
        dx
    } else {
        dxhat * &cache.inv_std
    };
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// encoder convolution: kernel spans all C rows and `k` samples, valid padding

/// `windows` is `(W, C, m)`; returns the im2col matrix `(W·L, C·k)` with `L = m - k + 1`.
pub fn im2col_valid<S: Scalar>(windows: ArrayView3<S>, k: usize) -> Array2<S> {
    let (w, c, m) = windows.dim();
    let l = m + 1 - k;
    let mut cols = Array2::zeros((w * l, c * k));
    for wi in 0..w {
        for t in 0..l {
            let mut row = cols.row_mut(wi * l + t);
            for ch in 0..c {
                let src = windows.slice(s![wi, ch, t..t + k]);
                row.slice_mut(s![ch * k..(ch + 1) * k]).assign(&src);
            }
        }
    }
    cols
}

/// `cols · kernelᵀ + bias`.
pub fn linear_forward<S: Scalar>(x: ArrayView2<S>, w_t: ArrayView2<S>, bias: ArrayView1<S>) -> Array2<S> {
    let mut y = x.dot(&w_t);
    y += &bias;
    y
}

// ---------------------------------------------------------------------------
// max pooling over time, non-overlapping, flattening to `j·F + f`

pub struct PoolCache {
    /// Source row of every pooled output, laid out like the output.
    pub argmax: Vec<usize>,
    pub in_rows: usize,
}

/// `x` is `(W·L, F)`; returns `(W, L'·F)` with `L' = floor(L / pool)`.
pub fn maxpool_forward<S: Scalar>(x: ArrayView2<S>, windows: usize, pool: usize) -> (Array2<S>, PoolCache) {
    let (rows, f) = x.dim();
    let l = rows / windows;
    let lp = l / pool;
    let mut out = Array2::zeros((windows, lp * f));
    let mut argmax = vec![0usize; windows * lp * f];
    for w in 0..windows {
        for j in 0..lp {
            for ch in 0..f {
                let mut best = S::neg_infinity();
                let mut best_row = 0;
                for t in j * pool..(j + 1) * pool {
                    let r = w * l + t;
                    let v = x[[r, ch]];
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                out[[w, j * f + ch]] = best;
                argmax[(w * lp + j) * f + ch] = best_row;
            }
        }
    }
    (out, PoolCache { argmax, in_rows: rows })
}

pub fn maxpool_backward<S: Scalar>(cache: &PoolCache, dy: ArrayView2<S>, channels: usize) -> Array2<S> {
    let mut dx = Array2::zeros((cache.in_rows, channels));
    for (idx, &g) in dy.iter().enumerate() {
        let ch = idx % channels;
        dx[[cache.argmax[idx], ch]] += g;
    }
    dx
}

// ---------------------------------------------------------------------------
// LSTM, gate order (input, forget, cell, output)

pub struct LstmRefs<'a, S> {
    /// `(I, 4H)`
    pub w: ArrayView2<'a, S>,
    /// `(H, 4H)`
    pub u: ArrayView2<'a, S>,
    /// `4H`
    pub b: ArrayView1<'a, S>,
}

pub struct LstmCache<S> {
    pub xs: Vec<Array2<S>>,
    /// `h_0 … h_n`, `h_0 = 0`
    pub hs: Vec<Array2<S>>,
    /// `c_0 … c_n`
    pub cs: Vec<Array2<S>>,
    /// activated gates per step, `(B, 4H)`
    pub gates: Vec<Array2<S>>,
    pub tanh_c: Vec<Array2<S>>,
}

impl<S> LstmCache<S> {
    /// Hidden states `h_1 … h_n`.
    pub fn outputs(&self) -> &[Array2<S>] {
        &self.hs[1..]
    }
}

pub fn lstm_forward<S: Scalar>(p: &LstmRefs<'_, S>, xs: Vec<Array2<S>>) -> LstmCache<S> {
    let hidden = p.u.nrows();
    let batch = xs.first().map(|x| x.nrows()).unwrap_or(0);
    let mut hs = vec![Array2::zeros((batch, hidden))];
    let mut cs = vec![Array2::zeros((batch, hidden))];
    let mut gates = Vec::with_capacity(xs.len());
    let mut tanh_c = Vec::with_capacity(xs.len());
    for x in &xs {
        let mut z = x.dot(&p.w) + hs.last().unwrap().dot(&p.u);
        z += &p.b;
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if (2 * hidden..3 * hidden).contains(&j) {
                    v.tanh()
                } else {
                    sigmoid(*v)
                };
            }
        }
        let i = z.slice(s![.., 0..hidden]);
        let f = z.slice(s![.., hidden..2 * hidden]);
        let g = z.slice(s![.., 2 * hidden..3 * hidden]);
        let o = z.slice(s![.., 3 * hidden..4 * hidden]);
        let c = &f * cs.last().unwrap() + &i * &g;
        let tc = c.mapv(|v| v.tanh());
        let h = &o * &tc;
        hs.push(h);
        cs.push(c);
        tanh_c.push(tc);
        gates.push(z);
    }
    LstmCache {
        xs,
        hs,
        cs,
        gates,
        tanh_c,
    }
}

pub struct LstmGrads<S> {
    pub dxs: Vec<Array2<S>>,
    pub dw: Array2<S>,
    pub du: Array2<S>,
    pub db: Array1<S>,
}

/// Backpropagation through time given the loss gradient at every hidden output.
pub fn lstm_backward<S: Scalar>(p: &LstmRefs<'_, S>, cache: &LstmCache<S>, dh_out: &[Array2<S>]) -> LstmGrads<S> {
    let hidden = p.u.nrows();
    let steps = cache.xs.len();
    let batch = cache.hs[0].nrows();
    let mut dw = Array2::zeros(p.w.raw_dim());
    let mut du = Array2::zeros(p.u.raw_dim());
    let mut db = Array1::zeros(p.b.raw_dim());
    let mut dxs = vec![Array2::zeros((0, 0)); steps];
    let mut dh_next = Array2::<S>::zeros((batch, hidden));
    let mut dc_next = Array2::<S>::zeros((batch, hidden));
    let one = S::one();
    for t in (0..steps).rev() {
        let gates = &cache.gates[t];
        let i = gates.slice(s![.., 0..hidden]);
        let f = gates.slice(s![.., hidden..2 * hidden]);
        let g = gates.slice(s![.., 2 * hidden..3 * hidden]);
        let o = gates.slice(s![.., 3 * hidden..4 * hidden]);
        let tc = &cache.tanh_c[t];
        let c_prev = &cache.cs[t];
        let dh = &dh_out[t] + &dh_next;
        let mut dz = Array2::<S>::zeros((batch, 4 * hidden));
        let mut dc = dc_next.clone();
        Zip::from(&mut dc)
            .and(&dh)
            .and(&o)
            .and(tc)
            .for_each(|dc, &dh, &o, &tc| *dc += dh * o * (one - tc * tc));
        {
            let (mut di, rest) = dz.view_mut().split_at(Axis(1), hidden);
            let (mut df, rest) = rest.split_at(Axis(1), hidden);
            let (mut dg, mut do_) = rest.split_at(Axis(1), hidden);
            Zip::from(&mut di).and(&dc).and(&i).and(&g).for_each(|d, &dc, &i, &g| {
                *d = dc * g * i * (one - i);
            });
            Zip::from(&mut df).and(&dc).and(&f).and(c_prev).for_each(|d, &dc, &f, &cp| {
                *d = dc * cp * f * (one - f);
            });
            Zip::from(&mut dg).and(&dc).and(&i).and(&g).for_each(|d, &dc, &i, &g| {
                *d = dc * i * (one - g * g);
            });
            Zip::from(&mut do_).and(&dh).and(&o).and(tc).for_each(|d, &dh, &o, &tc| {
                *d = dh * tc * o * (one - o);
            });
        }
        dw += &cache.xs[t].t().dot(&dz);
        du += &cache.hs[t].t().dot(&dz);
        db += &dz.sum_axis(Axis(0));
        dxs[t] = dz.dot(&p.w.t());
        dh_next = dz.dot(&p.u.t());
        dc_next = &dc * &f;
    }
    LstmGrads { dxs, dw, du, db }
}

// ---------------------------------------------------------------------------
// additive attention pooling over the hidden sequence

pub struct AttentionOut<S> {
    /// `(B, n)`
    pub alpha: Array2<S>,
    /// `(B, d)`
    pub v: Array2<S>,
}

/// `α_i = softmax_i(W·h_i + b)`, `v = Σ α_i h_i`; `w` is `None` for plain averaging.
pub fn attention_forward<S: Scalar>(
    hs: &[Array2<S>],
    w: Option<ArrayView1<S>>,
    b: S,
) -> AttentionOut<S> {
    let n = hs.len();
    let (batch, d) = hs[0].dim();
    let alpha = match w {
        Some(w) => {
            let mut scores = Array2::zeros((batch, n));
            for (i, h) in hs.iter().enumerate() {
                let col = h.dot(&w).mapv(|v| v + b);
                scores.column_mut(i).assign(&col);
            }
            softmax_rows(scores.view())
        }
        None => Array2::from_elem((batch, n), S::one() / S::lit(n as f64)),
    };
    let mut v = Array2::zeros((batch, d));
    for (i, h) in hs.iter().enumerate() {
        v += &(h * &alpha.column(i).insert_axis(Axis(1)));
    }
    AttentionOut { alpha, v }
}

pub struct AttentionGrads<S> {
    pub dhs: Vec<Array2<S>>,
    pub dw: Option<Array1<S>>,
    pub db: S,
}

pub fn attention_backward<S: Scalar>(
    hs: &[Array2<S>],
    w: Option<ArrayView1<S>>,
    out: &AttentionOut<S>,
    dv: ArrayView2<S>,
) -> AttentionGrads<S> {
    let alpha = &out.alpha;
    let mut dhs: Vec<Array2<S>> = hs
        .iter()
        .enumerate()
        .map(|(i, _)| &dv * &alpha.column(i).insert_axis(Axis(1)))
        .collect();
    let Some(w) = w else {
        return AttentionGrads {
            dhs,
            dw: None,
            db: S::zero(),
        };
    };
    let (batch, n) = alpha.dim();
    let mut dalpha = Array2::zeros((batch, n));
    for (i, h) in hs.iter().enumerate() {
        let col = (h * &dv).sum_axis(Axis(1));
        dalpha.column_mut(i).assign(&col);
    }
    let dscore = softmax_rows_backward(alpha.view(), dalpha.view());
    let mut dw = Array1::zeros(w.len());
    for (i, h) in hs.iter().enumerate() {
        let ds = dscore.column(i);
        dw += &h.t().dot(&ds);
        dhs[i] += &(ds.insert_axis(Axis(1)).to_owned() * &w);
    }
    AttentionGrads {
        dhs,
        dw: Some(dw),
        db: dscore.sum(),
    }
}

// ---------------------------------------------------------------------------
// decoder image operations on `(N, H, W)` single-channel stacks

pub fn upsample_nearest<S: Scalar>(x: ArrayView3<S>, ry: usize, rx: usize) -> Array3<S> {
    let (n, h, w) = x.dim();
    Array3::from_shape_fn((n, h * ry, w * rx), |(i, y, xx)| x[[i, y / ry, xx / rx]])
}

pub fn upsample_nearest_backward<S: Scalar>(dy: ArrayView3<S>, ry: usize, rx: usize) -> Array3<S> {
    let (n, hh, ww) = dy.dim();
    let mut dx = Array3::zeros((n, hh / ry, ww / rx));
    for ((i, y, x), &g) in dy.indexed_iter() {
        dx[[i, y / ry, x / rx]] += g;
    }
    dx
}

/// im2col for a `k × k` same-padded convolution of single-channel images:
/// `(N·H·W, k·k)` with zero padding.
pub fn im2col_same<S: Scalar>(x: ArrayView3<S>, k: usize) -> Array2<S> {
    let (n, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let mut cols = Array2::zeros((n * h * w, k * k));
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut row = cols.row_mut((i * h + y) * w + xx);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[ky * k + kx] = x[[i, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im_same<S: Scalar>(dcols: ArrayView2<S>, shape: (usize, usize, usize), k: usize) -> Array3<S> {
    let (n, h, w) = shape;
    let pad = (k / 2) as isize;
    let mut dx = Array3::zeros(shape);
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = dcols.row((i * h + y) * w + xx);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[[i, sy as usize, sx as usize]] += row[ky * k + kx];
                    }
                }
            }
        }
    }
    dx
}

/// Interpolation matrix `(out, in)` for 1-D bilinear resizing with half-pixel centers.
/// Every row sums to one.
pub fn bilinear_matrix<S: Scalar>(input: usize, output: usize) -> Array2<S> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += S::lit(1.0 - frac);
        m[[o, i1]] += S::lit(frac);
    }
    m
}

/// Resizes every image of `(N, H, W)` to `(N, rows.nrows(), cols.nrows())` with
/// `rows · X · colsᵀ`.
pub fn resize<S: Scalar>(x: ArrayView3<S>, rows: ArrayView2<S>, cols: ArrayView2<S>) -> Array3<S> {
    let n = x.dim().0;
    let mut out = Array3::zeros((n, rows.nrows(), cols.nrows()));
    for i in 0..n {
        let y = rows.dot(&x.index_axis(Axis(0), i)).dot(&cols.t());
        out.index_axis_mut(Axis(0), i).assign(&y);
    }
    out
}

pub fn resize_backward<S: Scalar>(dy: ArrayView3<S>, rows: ArrayView2<S>, cols: ArrayView2<S>) -> Array3<S> {
    let n = dy.dim().0;
    let mut dx = Array3::zeros((n, rows.ncols(), cols.ncols()));
    for i in 0..n {
        let g = rows.t().dot(&dy.index_axis(Axis(0), i)).dot(&cols);
        dx.index_axis_mut(Axis(0), i).assign(&g);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_closed_form() {
        let p = softmax_rows(array![[0.0f64, 3.0f64.ln()]].view());
        assert!((p[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((p[[0, 1]] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_scores() {
        let p = softmax_rows(array![[1000.0f32, 1000.0]].view());
        assert_eq!(p, array![[0.5f32, 0.5]]);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(8, 64), (200, 400), (3, 3), (5, 2), (1, 4)] {
            let m = bilinear_matrix::<f64>(i, o);
            for r in m.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
        // same size is the identity
        assert_eq!(bilinear_matrix::<f64>(4, 4), Array2::<f64>::eye(4));
    }

    #[test]
    fn pool_arithmetic() {
        let x = Array2::<f64>::from_shape_fn((2 * 351, 3), |(r, c)| ((r * 7 + c * 3) % 11) as f64);
        let (y, _) = maxpool_forward(x.view(), 2, 80);
        assert_eq!(y.dim(), (2, 4 * 3));
    }

    #[test]
    fn upsample_shapes() {
        let x = Array3::<f64>::ones((3, 2, 50));
        assert_eq!(upsample_nearest(x.view(), 4, 4).dim(), (3, 8, 200));
    }
}
