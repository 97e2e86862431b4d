//! Differentiable operations over [`Tensor`]s.
//!
//! Every op validates shapes, computes its forward result, and (when the
//! tape is recording and an input requires a gradient) pushes a backward
//! closure onto the [`Tape`]. Backward closures compute all input gradients
//! before accumulating them, so a tensor may appear as several inputs of the
//! same op.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::tape::mark_output;
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// Boolean keep-mask paired with a score matrix in [`masked_softmax`].
#[derive(Debug, Clone)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn from_vec(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: keep.len(),
            });
        }
        Ok(Mask { rows, cols, keep })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn keep(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.cols + col]
    }
}

fn check_same_shape<S: Scalar>(
    context: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimensionMismatch {
            context,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// y = x W + b, with b broadcast over rows.
pub fn affine<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (t, d_in) = x.shape();
    let (wr, d_out) = w.shape();
    if d_in != wr {
        return Err(TensorError::DimensionMismatch {
            context: "affine: x cols vs weight rows",
            left: x.shape(),
            right: w.shape(),
        });
    }
    if b.shape() != (1, d_out) {
        return Err(TensorError::DimensionMismatch {
            context: "affine: bias shape",
            left: (1, d_out),
            right: b.shape(),
        });
    }

    let mut out = vec![S::zero(); t * d_out];
    {
        let xv = x.values();
        let wv = w.values();
        let bv = b.values();
        for r in 0..t {
            let yr = &mut out[r * d_out..(r + 1) * d_out];
            yr.copy_from_slice(&bv);
            let xr = &xv[r * d_in..(r + 1) * d_in];
            for (i, &xc) in xr.iter().enumerate() {
                let wrow = &wv[i * d_out..(i + 1) * d_out];
                for (y, &wc) in yr.iter_mut().zip(wrow) {
                    *y = *y + xc * wc;
                }
            }
        }
    }
    let y = Tensor::from_vec(t, d_out, out)?;

    if mark_output(tape, &[x, w, b], &y) {
        let (x, w, b, y) = (x.clone(), w.clone(), b.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let (dx, dw, db) = {
                let xv = x.values();
                let wv = w.values();
                let mut dx = vec![S::zero(); t * d_in];
                let mut dw = vec![S::zero(); d_in * d_out];
                let mut db = vec![S::zero(); d_out];
                for r in 0..t {
                    let gr = &g[r * d_out..(r + 1) * d_out];
                    let xr = &xv[r * d_in..(r + 1) * d_in];
                    // dx[r,i] = sum_o g[r,o] w[i,o]
                    for i in 0..d_in {
                        let wrow = &wv[i * d_out..(i + 1) * d_out];
                        let mut acc = S::zero();
                        for (&gv, &wc) in gr.iter().zip(wrow) {
                            acc = acc + gv * wc;
                        }
                        dx[r * d_in + i] = acc;
                    }
                    // dw[i,o] += x[r,i] g[r,o]; db[o] += g[r,o]
                    for i in 0..d_in {
                        let xc = xr[i];
                        let dwrow = &mut dw[i * d_out..(i + 1) * d_out];
                        for (dwv, &gv) in dwrow.iter_mut().zip(gr) {
                            *dwv = *dwv + xc * gv;
                        }
                    }
                    for (dbv, &gv) in db.iter_mut().zip(gr) {
                        *dbv = *dbv + gv;
                    }
                }
                (dx, dw, db)
            };
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if w.requires_grad() {
                w.accumulate_grad(&dw);
            }
            if b.requires_grad() {
                b.accumulate_grad(&db);
            }
        }));
    }
    Ok(y)
}

/// Same-length 1-D convolution over the temporal axis with zero padding.
///
/// The kernel is stored flattened as `(k * d_in) x d_out`, row `a * d_in + c`
/// holding tap `a` for input channel `c`. Tap `a` reads frame
/// `t + (a - (k-1)/2) * dilation`; frames outside `[0, T)` contribute zero,
/// so the output always has the input's length.
pub fn dilated_conv1d<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    k: usize,
    dilation: usize,
) -> Result<Tensor<S>> {
    if k % 2 == 0 {
        return Err(TensorError::EvenKernel(k));
    }
    if dilation == 0 {
        return Err(TensorError::ZeroDilation(dilation));
    }
    let (t_len, d_in) = x.shape();
    let (kr, d_out) = kernel.shape();
    if kr != k * d_in {
        return Err(TensorError::DimensionMismatch {
            context: "dilated_conv1d: kernel rows vs k * input channels",
            left: (k * d_in, d_out),
            right: kernel.shape(),
        });
    }
    let center = (k - 1) / 2;

    let mut out = vec![S::zero(); t_len * d_out];
    {
        let xv = x.values();
        let kv = kernel.values();
        for t in 0..t_len {
            let yr = &mut out[t * d_out..(t + 1) * d_out];
            for a in 0..k {
                let j = t as isize + (a as isize - center as isize) * dilation as isize;
                if j < 0 || j >= t_len as isize {
                    continue;
                }
                let xr = &xv[j as usize * d_in..(j as usize + 1) * d_in];
                for (c, &xc) in xr.iter().enumerate() {
                    let krow = &kv[(a * d_in + c) * d_out..(a * d_in + c + 1) * d_out];
                    for (y, &kvl) in yr.iter_mut().zip(krow) {
                        *y = *y + xc * kvl;
                    }
                }
            }
        }
    }
    let y = Tensor::from_vec(t_len, d_out, out)?;

    if mark_output(tape, &[x, kernel], &y) {
        let (x, kernel, y) = (x.clone(), kernel.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let (dx, dk) = {
                let xv = x.values();
                let kv = kernel.values();
                let mut dx = vec![S::zero(); t_len * d_in];
                let mut dk = vec![S::zero(); k * d_in * d_out];
                for t in 0..t_len {
                    let gr = &g[t * d_out..(t + 1) * d_out];
                    for a in 0..k {
                        let j = t as isize + (a as isize - center as isize) * dilation as isize;
                        if j < 0 || j >= t_len as isize {
                            continue;
                        }
                        let j = j as usize;
                        let xr = &xv[j * d_in..(j + 1) * d_in];
                        for c in 0..d_in {
                            let krow = &kv[(a * d_in + c) * d_out..(a * d_in + c + 1) * d_out];
                            let mut acc = S::zero();
                            for (&gv, &kvl) in gr.iter().zip(krow) {
                                acc = acc + gv * kvl;
                            }
                            dx[j * d_in + c] = dx[j * d_in + c] + acc;
                            let dkrow =
                                &mut dk[(a * d_in + c) * d_out..(a * d_in + c + 1) * d_out];
                            let xc = xr[c];
                            for (dkv, &gv) in dkrow.iter_mut().zip(gr) {
                                *dkv = *dkv + xc * gv;
                            }
                        }
                    }
                }
                (dx, dk)
            };
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if kernel.requires_grad() {
                kernel.accumulate_grad(&dk);
            }
        }));
    }
    Ok(y)
}

// Exp-normalize one row over its kept entries; masked entries come out
// exactly zero. Shared by masked_softmax and the banded attention kernel.
fn softmax_row_masked<S: Scalar>(scores: &[S], keep: impl Fn(usize) -> bool, out: &mut [S]) {
    let mut max = S::neg_infinity();
    for (i, &s) in scores.iter().enumerate() {
        if keep(i) && s > max {
            max = s;
        }
    }
    let mut sum = S::zero();
    for (i, &s) in scores.iter().enumerate() {
        if keep(i) {
            let e = (s - max).exp();
            out[i] = e;
            sum = sum + e;
        } else {
            out[i] = S::zero();
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        if keep(i) {
            *o = *o / sum;
        }
    }
}

/// Row-wise softmax over the unmasked entries; masked entries are exactly 0.
pub fn masked_softmax<S: Scalar>(
    tape: &mut Tape<S>,
    scores: &Tensor<S>,
    mask: &Mask,
) -> Result<Tensor<S>> {
    let (rows, cols) = scores.shape();
    if (rows, cols) != mask.shape() {
        return Err(TensorError::DimensionMismatch {
            context: "masked_softmax: scores vs mask",
            left: (rows, cols),
            right: mask.shape(),
        });
    }
    for r in 0..rows {
        if !(0..cols).any(|c| mask.keep(r, c)) {
            return Err(TensorError::FullyMaskedRow(r));
        }
    }

    let mut out = vec![S::zero(); rows * cols];
    {
        let sv = scores.values();
        for r in 0..rows {
            softmax_row_masked(
                &sv[r * cols..(r + 1) * cols],
                |c| mask.keep(r, c),
                &mut out[r * cols..(r + 1) * cols],
            );
        }
    }
    let y = Tensor::from_vec(rows, cols, out)?;

    if mark_output(tape, &[scores], &y) {
        let (scores, y) = (scores.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let ds = {
                let p = y.values();
                let mut ds = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let pr = &p[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = S::zero();
                    for (&pv, &gv) in pr.iter().zip(gr) {
                        dot = dot + pv * gv;
                    }
                    let dsr = &mut ds[r * cols..(r + 1) * cols];
                    for ((dsv, &pv), &gv) in dsr.iter_mut().zip(pr).zip(gr) {
                        // p is zero at masked entries, so they get no gradient.
                        *dsv = pv * (gv - dot);
                    }
                }
                ds
            };
            if scores.requires_grad() {
                scores.accumulate_grad(&ds);
            }
        }));
    }
    Ok(y)
}

/// Row-wise softmax over the full row (no mask).
pub fn row_softmax<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = x.shape();
    let all = Mask::from_vec(rows, cols, vec![true; rows * cols])?;
    masked_softmax(tape, x, &all)
}

/// Per-channel normalization over the temporal axis: `(x - mean) / sqrt(var + eps)`.
///
/// Unparameterized (no learned scale or shift); variance is the biased
/// (1/T) estimator.
pub fn instance_norm<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let (t_len, d) = x.shape();
    if t_len == 0 {
        return Err(TensorError::EmptyInput("instance_norm"));
    }
    let inv_t = S::one() / S::from_usize(t_len);

    let mut mean = vec![S::zero(); d];
    let mut var = vec![S::zero(); d];
    let mut out = vec![S::zero(); t_len * d];
    let mut inv_std = vec![S::zero(); d];
    {
        let xv = x.values();
        for t in 0..t_len {
            let xr = &xv[t * d..(t + 1) * d];
            for (m, &v) in mean.iter_mut().zip(xr) {
                *m = *m + v;
            }
        }
        for m in mean.iter_mut() {
            *m = *m * inv_t;
        }
        for t in 0..t_len {
            let xr = &xv[t * d..(t + 1) * d];
            for ((vv, &v), &m) in var.iter_mut().zip(xr).zip(&mean) {
                let c = v - m;
                *vv = *vv + c * c;
            }
        }
        for (s, &v) in inv_std.iter_mut().zip(&var) {
            *s = S::one() / (v * inv_t + eps).sqrt();
        }
        for t in 0..t_len {
            let xr = &xv[t * d..(t + 1) * d];
            let yr = &mut out[t * d..(t + 1) * d];
            for ((y, &v), (&m, &s)) in yr.iter_mut().zip(xr).zip(mean.iter().zip(&inv_std)) {
                *y = (v - m) * s;
            }
        }
    }
    let y = Tensor::from_vec(t_len, d, out)?;

    if mark_output(tape, &[x], &y) {
        let (x, y) = (x.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let dx = {
                let yv = y.values();
                // dx = inv_std * (g - mean(g) - y * mean(g .* y)), per channel
                let mut g_mean = vec![S::zero(); d];
                let mut gy_mean = vec![S::zero(); d];
                for t in 0..t_len {
                    let gr = &g[t * d..(t + 1) * d];
                    let yr = &yv[t * d..(t + 1) * d];
                    for ((gm, gym), (&gv, &yvv)) in
                        g_mean.iter_mut().zip(gy_mean.iter_mut()).zip(gr.iter().zip(yr))
                    {
                        *gm = *gm + gv;
                        *gym = *gym + gv * yvv;
                    }
                }
                for (gm, gym) in g_mean.iter_mut().zip(gy_mean.iter_mut()) {
                    *gm = *gm * inv_t;
                    *gym = *gym * inv_t;
                }
                let mut dx = vec![S::zero(); t_len * d];
                for t in 0..t_len {
                    let gr = &g[t * d..(t + 1) * d];
                    let yr = &yv[t * d..(t + 1) * d];
                    let dr = &mut dx[t * d..(t + 1) * d];
                    for c in 0..d {
                        dr[c] = inv_std[c] * (gr[c] - g_mean[c] - yr[c] * gy_mean[c]);
                    }
                }
                dx
            };
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
        }));
    }
    Ok(y)
}

/// Zeroes whole feature channels with probability `rate` during training,
/// scaling survivors by `1/(1-rate)`. Identity in eval mode.
pub fn channel_dropout<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidDropoutRate(rate));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let (t_len, d) = x.shape();
    let keep_scale = S::from_f64(1.0 / (1.0 - rate));
    let col_scale: Vec<S> = (0..d)
        .map(|_| {
            if rng.random::<f64>() < rate {
                S::zero()
            } else {
                keep_scale
            }
        })
        .collect();

    let mut out = vec![S::zero(); t_len * d];
    {
        let xv = x.values();
        for t in 0..t_len {
            let xr = &xv[t * d..(t + 1) * d];
            let yr = &mut out[t * d..(t + 1) * d];
            for ((y, &v), &s) in yr.iter_mut().zip(xr).zip(&col_scale) {
                *y = v * s;
            }
        }
    }
    let y = Tensor::from_vec(t_len, d, out)?;

    if mark_output(tape, &[x], &y) {
        let (x, y) = (x.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let mut dx = vec![S::zero(); t_len * d];
            for t in 0..t_len {
                let gr = &g[t * d..(t + 1) * d];
                let dr = &mut dx[t * d..(t + 1) * d];
                for ((dv, &gv), &s) in dr.iter_mut().zip(gr).zip(&col_scale) {
                    *dv = gv * s;
                }
            }
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
        }));
    }
    Ok(y)
}

/// Elementwise max(x, 0). The subgradient at 0 is 0.
pub fn relu<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = x.shape();
    let out: Vec<S> = x.values().iter().map(|&v| v.max(S::zero())).collect();
    let y = Tensor::from_vec(rows, cols, out)?;

    if mark_output(tape, &[x], &y) {
        let (x, y) = (x.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let dx: Vec<S> = {
                let xv = x.values();
                xv.iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                    .collect()
            };
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
        }));
    }
    Ok(y)
}

/// y = a + alpha * b (alpha is a constant, not a tensor).
pub fn add_scaled<S: Scalar>(
    tape: &mut Tape<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    alpha: S,
) -> Result<Tensor<S>> {
    check_same_shape("add_scaled", a, b)?;
    let (rows, cols) = a.shape();
    let out: Vec<S> = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(&av, &bv)| av + alpha * bv)
        .collect();
    let y = Tensor::from_vec(rows, cols, out)?;

    if mark_output(tape, &[a, b], &y) {
        let (a, b, y) = (a.clone(), b.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            if a.requires_grad() {
                a.accumulate_grad(&g);
            }
            if b.requires_grad() {
                let db: Vec<S> = g.iter().map(|&gv| alpha * gv).collect();
                b.accumulate_grad(&db);
            }
        }));
    }
    Ok(y)
}

/// Column-wise concatenation: `T x c_a` and `T x c_b` give `T x (c_a + c_b)`.
pub fn concat_cols<S: Scalar>(
    tape: &mut Tape<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    if ra != rb {
        return Err(TensorError::DimensionMismatch {
            context: "concat_cols: row counts",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let cols = ca + cb;
    let mut out = vec![S::zero(); ra * cols];
    {
        let av = a.values();
        let bv = b.values();
        for r in 0..ra {
            out[r * cols..r * cols + ca].copy_from_slice(&av[r * ca..(r + 1) * ca]);
            out[r * cols + ca..(r + 1) * cols].copy_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
    }
    let y = Tensor::from_vec(ra, cols, out)?;

    if mark_output(tape, &[a, b], &y) {
        let (a, b, y) = (a.clone(), b.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let mut da = vec![S::zero(); ra * ca];
            let mut db = vec![S::zero(); rb * cb];
            for r in 0..ra {
                da[r * ca..(r + 1) * ca].copy_from_slice(&g[r * cols..r * cols + ca]);
                db[r * cb..(r + 1) * cb].copy_from_slice(&g[r * cols + ca..(r + 1) * cols]);
            }
            if a.requires_grad() {
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                b.accumulate_grad(&db);
            }
        }));
    }
    Ok(y)
}

/// Sum of all entries as a 1x1 tensor.
pub fn sum_all<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut acc = S::zero();
    for &v in x.values().iter() {
        acc = acc + v;
    }
    let y = Tensor::scalar(acc);

    if mark_output(tape, &[x], &y) {
        let (x, y) = (x.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            if x.requires_grad() {
                let dx = vec![g[0]; x.len()];
                x.accumulate_grad(&dx);
            }
        }));
    }
    Ok(y)
}

/// Instrumentation returned by [`banded_attention`].
pub struct AttentionInfo<S> {
    /// Number of attention scores actually computed (clipped neighborhoods).
    pub scores_materialized: u64,
    /// Post-softmax weights of the anchor frame, expanded to length T with
    /// zeros outside the window; present when an anchor was requested.
    pub anchor_row: Option<Vec<S>>,
}

/// Windowed scaled dot-product attention with banded score storage.
///
/// Frame `t` attends to frames `j` with `|j - t| <= window/2`, clipped at the
/// sequence bounds. Scores are held in a `T x (window+1)` band (narrowed to
/// `T x (2T-1)` when the window exceeds the sequence), never as a full
/// `T x T` matrix, and only in-range entries are computed.
pub fn banded_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    window: usize,
    anchor: Option<usize>,
) -> Result<(Tensor<S>, AttentionInfo<S>)> {
    check_same_shape("banded_attention: q vs k", q, k)?;
    check_same_shape("banded_attention: q vs v", q, v)?;
    let (t_len, d) = q.shape();
    if t_len == 0 {
        return Err(TensorError::EmptyInput("banded_attention"));
    }
    debug_assert!(window >= 2 && window % 2 == 0, "window must be even and >= 2");
    // Any half-width >= T-1 already covers the whole sequence; narrowing the
    // band to that point changes nothing but bounds the storage by T x (2T-1).
    let half = (window / 2).min(t_len - 1);
    let band = 2 * half + 1;
    let scale = S::one() / S::from_usize(d).sqrt();

    let mut weights = vec![S::zero(); t_len * band];
    let mut out = vec![S::zero(); t_len * d];
    let mut count: u64 = 0;
    {
        let qv = q.values();
        let kv = k.values();
        let vv = v.values();
        let mut row_scores = vec![S::zero(); band];
        for t in 0..t_len {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(t_len - 1);
            let qr = &qv[t * d..(t + 1) * d];
            for j in lo..=hi {
                let o = j + half - t;
                let kr = &kv[j * d..(j + 1) * d];
                let mut dot = S::zero();
                for (&a, &b) in qr.iter().zip(kr) {
                    dot = dot + a * b;
                }
                row_scores[o] = dot * scale;
                count += 1;
            }
            let lo_o = lo + half - t;
            let hi_o = hi + half - t;
            softmax_row_masked(
                &row_scores,
                |o| (lo_o..=hi_o).contains(&o),
                &mut weights[t * band..(t + 1) * band],
            );
            let wr = &weights[t * band..(t + 1) * band];
            let yr = &mut out[t * d..(t + 1) * d];
            for j in lo..=hi {
                let p = wr[j + half - t];
                let vr = &vv[j * d..(j + 1) * d];
                for (y, &vc) in yr.iter_mut().zip(vr) {
                    *y = *y + p * vc;
                }
            }
        }
    }

    let anchor_row = anchor.map(|frame| {
        debug_assert!(frame < t_len);
        let mut row = vec![S::zero(); t_len];
        let lo = frame.saturating_sub(half);
        let hi = (frame + half).min(t_len - 1);
        for j in lo..=hi {
            row[j] = weights[frame * band + (j + half - frame)];
        }
        row
    });

    let y = Tensor::from_vec(t_len, d, out)?;
    if mark_output(tape, &[q, k, v], &y) {
        let (q, k, v, y) = (q.clone(), k.clone(), v.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let (dq, dk, dv) = {
                let qv = q.values();
                let kv = k.values();
                let vv = v.values();
                let mut dq = vec![S::zero(); t_len * d];
                let mut dk = vec![S::zero(); t_len * d];
                let mut dv = vec![S::zero(); t_len * d];
                let mut d_p = vec![S::zero(); band];
                for t in 0..t_len {
                    let lo = t.saturating_sub(half);
                    let hi = (t + half).min(t_len - 1);
                    let gr = &g[t * d..(t + 1) * d];
                    let wr = &weights[t * band..(t + 1) * band];
                    // d_p[o] = g[t] . v[j]; dv[j] += p * g[t]
                    let mut dot_pw = S::zero();
                    for j in lo..=hi {
                        let o = j + half - t;
                        let vr = &vv[j * d..(j + 1) * d];
                        let mut acc = S::zero();
                        for (&gv, &vc) in gr.iter().zip(vr) {
                            acc = acc + gv * vc;
                        }
                        d_p[o] = acc;
                        dot_pw = dot_pw + acc * wr[o];
                        let p = wr[o];
                        let dvr = &mut dv[j * d..(j + 1) * d];
                        for (dvc, &gv) in dvr.iter_mut().zip(gr) {
                            *dvc = *dvc + p * gv;
                        }
                    }
                    // softmax VJP, then chain into q and k
                    let qr = &qv[t * d..(t + 1) * d];
                    for j in lo..=hi {
                        let o = j + half - t;
                        let ds = wr[o] * (d_p[o] - dot_pw) * scale;
                        let kr = &kv[j * d..(j + 1) * d];
                        let dqr = &mut dq[t * d..(t + 1) * d];
                        for (dqc, &kc) in dqr.iter_mut().zip(kr) {
                            *dqc = *dqc + ds * kc;
                        }
                        let dkr = &mut dk[j * d..(j + 1) * d];
                        for (dkc, &qc) in dkr.iter_mut().zip(qr) {
                            *dkc = *dkc + ds * qc;
                        }
                    }
                }
                (dq, dk, dv)
            };
            if q.requires_grad() {
                q.accumulate_grad(&dq);
            }
            if k.requires_grad() {
                k.accumulate_grad(&dk);
            }
            if v.requires_grad() {
                v.accumulate_grad(&dv);
            }
        }));
    }

    Ok((
        y,
        AttentionInfo {
            scores_materialized: count,
            anchor_row,
        },
    ))
}

/// Mean over frames of `-log(softmax(logits)[label])`, probabilities clamped
/// to `1e-12` before the log.
pub fn cross_entropy_mean<S: Scalar>(
    tape: &mut Tape<S>,
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<Tensor<S>> {
    let (t_len, classes) = logits.shape();
    if labels.len() != t_len {
        return Err(TensorError::LabelCountMismatch {
            frames: t_len,
            labels: labels.len(),
        });
    }
    for (frame, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::LabelOutOfRange {
                frame,
                label,
                classes,
            });
        }
    }
    if t_len == 0 {
        return Err(TensorError::EmptyInput("cross_entropy_mean"));
    }

    let clamp = S::from_f64(1e-12);
    let inv_t = S::one() / S::from_usize(t_len);
    let mut probs = vec![S::zero(); t_len * classes];
    let mut loss = S::zero();
    {
        let zv = logits.values();
        for t in 0..t_len {
            let zr = &zv[t * classes..(t + 1) * classes];
            softmax_row_masked(zr, |_| true, &mut probs[t * classes..(t + 1) * classes]);
            let p = probs[t * classes + labels[t]];
            loss = loss - p.max(clamp).ln();
        }
    }
    loss = loss * inv_t;
    let y = Tensor::scalar(loss);

    if mark_output(tape, &[logits], &y) {
        let (logits, y) = (logits.clone(), y.clone());
        let labels = labels.to_vec();
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let upstream = g[0] * inv_t;
            let mut dz = probs;
            for (t, &label) in labels.iter().enumerate() {
                let dr = &mut dz[t * classes..(t + 1) * classes];
                dr[label] = dr[label] - S::one();
                for d in dr.iter_mut() {
                    *d = *d * upstream;
                }
            }
            if logits.requires_grad() {
                logits.accumulate_grad(&dz);
            }
        }));
    }
    Ok(y)
}

/// Mean squared difference between adjacent rows: `(1/(T*C)) sum_{t>=1,c} (x[t,c]-x[t-1,c])^2`.
pub fn adjacent_sq_mean<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let (t_len, c) = x.shape();
    if t_len == 0 || c == 0 {
        return Err(TensorError::EmptyInput("adjacent_sq_mean"));
    }
    let norm = S::one() / S::from_usize(t_len * c);
    let mut acc = S::zero();
    {
        let xv = x.values();
        for t in 1..t_len {
            let prev = &xv[(t - 1) * c..t * c];
            let cur = &xv[t * c..(t + 1) * c];
            for (&a, &b) in cur.iter().zip(prev) {
                let dlt = a - b;
                acc = acc + dlt * dlt;
            }
        }
    }
    let y = Tensor::scalar(acc * norm);

    if mark_output(tape, &[x], &y) {
        let (x, y) = (x.clone(), y.clone());
        tape.push(Box::new(move || {
            let g = match y.grad() {
                Some(g) => g,
                None => return,
            };
            let dx = {
                let xv = x.values();
                let two = S::from_f64(2.0);
                let scale = g[0] * norm * two;
                let mut dx = vec![S::zero(); t_len * c];
                for t in 0..t_len {
                    for i in 0..c {
                        let mut d = S::zero();
                        if t >= 1 {
                            d = d + (xv[t * c + i] - xv[(t - 1) * c + i]);
                        }
                        if t + 1 < t_len {
                            d = d + (xv[t * c + i] - xv[(t + 1) * c + i]);
                        }
                        dx[t * c + i] = d * scale;
                    }
                }
                dx
            };
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
        }));
    }
    Ok(y)
}
