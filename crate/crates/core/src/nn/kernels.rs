//! Slice-level kernels shared by the taped (training) path and the plain
//! (streaming/decoding) path.
//!
//! Every kernel here processes rows independently and in a fixed operation
//! order, so computing a row alone or inside a batch gives the same bits.

use crate::scalar::Scalar;

/// Gate order inside the packed 5 * d_cell pre-activation row.
pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_LAMBDA: usize = 2;
pub const GATE_OUTPUT: usize = 3;
pub const GATE_CANDIDATE: usize = 4;
pub const NUM_GATES: usize = 5;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    // split on sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inputs of one batch of 2D-LSTM cells.
///
/// Row `r` of the batch reads `hw_rows[r]`, `sw_rows[r]` (projected source
/// and target encoder states, each `5 * dc` wide), the stacked recurrent
/// input `zz[r] = [z_left | z_below]` and the two predecessor cells.
pub struct CellBatch<'a, T> {
    pub dc: usize,
    pub hw_rows: Vec<&'a [T]>,
    pub sw_rows: Vec<&'a [T]>,
    pub bias: &'a [T],
    /// `2dc x 5dc`, rows `[U; V]`.
    pub uv: &'a [T],
    /// `n x 2dc`.
    pub zz: &'a [T],
    /// `n x dc` each.
    pub c_left: &'a [T],
    pub c_below: &'a [T],
}

/// Values saved by [`cell_forward`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct CellSaved<T> {
    /// Post-nonlinearity gates, `n x 5dc` in [`GATE_INPUT`].. order.
    pub acts: Vec<T>,
    /// `tanh(c)`, `n x dc`.
    pub tanh_c: Vec<T>,
}

/// Runs a batch of cells; writes `[z | c]` rows (`n x 2dc`) into `out`.
pub fn cell_forward<T: Scalar>(batch: &CellBatch<'_, T>, out: &mut [T]) -> CellSaved<T> {
    let dc = batch.dc;
    let n = batch.hw_rows.len();
    let w5 = NUM_GATES * dc;
    let mut acts = vec![T::zero(); n * w5];
    T::gemm(
        n,
        2 * dc,
        w5,
        T::one(),
        batch.zz,
        ((2 * dc) as isize, 1),
        batch.uv,
        (w5 as isize, 1),
        T::zero(),
        &mut acts,
        (w5 as isize, 1),
    );
    let mut tanh_c = vec![T::zero(); n * dc];
    for r in 0..n {
        let pre = &mut acts[r * w5..(r + 1) * w5];
        let (hw, sw) = (batch.hw_rows[r], batch.sw_rows[r]);
        for k in 0..w5 {
            pre[k] = ((hw[k] + sw[k]) + batch.bias[k]) + pre[k];
        }
        for k in 0..4 * dc {
            pre[k] = sigmoid(pre[k]);
        }
        for k in 4 * dc..w5 {
            pre[k] = pre[k].tanh();
        }
        let cl = &batch.c_left[r * dc..(r + 1) * dc];
        let cb = &batch.c_below[r * dc..(r + 1) * dc];
        let o = &mut out[r * 2 * dc..(r + 1) * 2 * dc];
        for k in 0..dc {
            let ig = pre[GATE_INPUT * dc + k];
            let fg = pre[GATE_FORGET * dc + k];
            let lam = pre[GATE_LAMBDA * dc + k];
            let og = pre[GATE_OUTPUT * dc + k];
            let g = pre[GATE_CANDIDATE * dc + k];
            let mixed = lam * cl[k] + (T::one() - lam) * cb[k];
            let c = fg * mixed + ig * g;
            let tc = c.tanh();
            tanh_c[r * dc + k] = tc;
            o[k] = og * tc;
            o[dc + k] = c;
        }
    }
    CellSaved { acts, tanh_c }
}

/// Gradients of one cell batch given upstream `d[z | c]` (`n x 2dc`).
pub struct CellGrads<T> {
    /// Gradient w.r.t. the pre-activations, `n x 5dc`; also the gradient of
    /// each `hw`/`sw` row and (summed) of the bias.
    pub d_pre: Vec<T>,
    /// `n x 2dc`, gradient of `[z_left | z_below]`.
    pub d_zz: Vec<T>,
    pub d_c_left: Vec<T>,
    pub d_c_below: Vec<T>,
}

pub fn cell_backward<T: Scalar>(
    batch: &CellBatch<'_, T>,
    saved: &CellSaved<T>,
    d_out: &[T],
) -> CellGrads<T> {
    let dc = batch.dc;
    let n = batch.hw_rows.len();
    let w5 = NUM_GATES * dc;
    let mut d_pre = vec![T::zero(); n * w5];
    let mut d_c_left = vec![T::zero(); n * dc];
    let mut d_c_below = vec![T::zero(); n * dc];
    for r in 0..n {
        let a = &saved.acts[r * w5..(r + 1) * w5];
        let dp = &mut d_pre[r * w5..(r + 1) * w5];
        let dz = &d_out[r * 2 * dc..r * 2 * dc + dc];
        let dcell = &d_out[r * 2 * dc + dc..(r + 1) * 2 * dc];
        let cl = &batch.c_left[r * dc..(r + 1) * dc];
        let cb = &batch.c_below[r * dc..(r + 1) * dc];
        for k in 0..dc {
            let ig = a[GATE_INPUT * dc + k];
            let fg = a[GATE_FORGET * dc + k];
            let lam = a[GATE_LAMBDA * dc + k];
            let og = a[GATE_OUTPUT * dc + k];
            let g = a[GATE_CANDIDATE * dc + k];
            let tc = saved.tanh_c[r * dc + k];
            let d_o = dz[k] * tc;
            let dcc = dcell[k] + dz[k] * og * (T::one() - tc * tc);
            let mixed = lam * cl[k] + (T::one() - lam) * cb[k];
            let d_f = dcc * mixed;
            let d_i = dcc * g;
            let d_g = dcc * ig;
            let d_lam = dcc * fg * (cl[k] - cb[k]);
            d_c_left[r * dc + k] = dcc * fg * lam;
            d_c_below[r * dc + k] = dcc * fg * (T::one() - lam);
            dp[GATE_INPUT * dc + k] = d_i * ig * (T::one() - ig);
            dp[GATE_FORGET * dc + k] = d_f * fg * (T::one() - fg);
            dp[GATE_LAMBDA * dc + k] = d_lam * lam * (T::one() - lam);
            dp[GATE_OUTPUT * dc + k] = d_o * og * (T::one() - og);
            dp[GATE_CANDIDATE * dc + k] = d_g * (T::one() - g * g);
        }
    }
    let mut d_zz = vec![T::zero(); n * 2 * dc];
    // d_zz = d_pre * uv^T
    T::gemm(
        n,
        w5,
        2 * dc,
        T::one(),
        &d_pre,
        (w5 as isize, 1),
        batch.uv,
        (1, w5 as isize),
        T::zero(),
        &mut d_zz,
        ((2 * dc) as isize, 1),
    );
    CellGrads {
        d_pre,
        d_zz,
        d_c_left,
        d_c_below,
    }
}

/// Layer normalization of one row; returns `(xhat, inv_std)` implicitly by
/// writing `xhat` into `xhat_out` and `y` into `y_out`.
pub fn layer_norm_row<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    xhat_out: &mut [T],
    y_out: &mut [T],
) -> T {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for k in 0..x.len() {
        let xh = (x[k] - mean) * inv_std;
        xhat_out[k] = xh;
        y_out[k] = gain[k] * xh + bias[k];
    }
    inv_std
}

/// Causal attention for query position `t` of one head.
///
/// `keys`/`values` hold rows `0..=t` with row stride `stride`, head columns
/// `[off, off + dh)`. Writes the (pre-dropout) softmax weights for positions
/// `0..=t` into `weights` and returns nothing; the caller combines values.
pub fn attention_weights_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    stride: usize,
    off: usize,
    dh: usize,
    t: usize,
    weights: &mut [T],
) {
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut max = T::neg_infinity();
    for u in 0..=t {
        let k = &keys[u * stride + off..u * stride + off + dh];
        let mut s = T::zero();
        for d in 0..dh {
            s = s + q[off + d] * k[d];
        }
        let s = s * scale;
        weights[u] = s;
        if s > max {
            max = s;
        }
    }
    let mut sum = T::zero();
    for w in weights.iter_mut().take(t + 1) {
        *w = (*w - max).exp();
        sum = sum + *w;
    }
    for w in weights.iter_mut().take(t + 1) {
        *w = *w / sum;
    }
}

/// `out[off..off+dh] = sum_u w[u] * values[u][off..off+dh]`.
pub fn attention_combine_row<T: Scalar>(
    w: &[T],
    values: &[T],
    stride: usize,
    off: usize,
    dh: usize,
    t: usize,
    out: &mut [T],
) {
    for d in 0..dh {
        out[off + d] = T::zero();
    }
    for (u, &wu) in w.iter().enumerate().take(t + 1) {
        let v = &values[u * stride + off..u * stride + off + dh];
        for d in 0..dh {
            out[off + d] = out[off + d] + wu * v[d];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-1000.0f64) >= 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
    }

    #[test]
    fn uniform_scores_give_uniform_weights() {
        // all-zero keys: every score is zero
        let q = vec![1.0f64; 4];
        let keys = vec![0.0f64; 4 * 4];
        let mut w = vec![0.0; 4];
        attention_weights_row(&q, &keys, 4, 0, 4, 2, &mut w);
        for &x in &w[..3] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
