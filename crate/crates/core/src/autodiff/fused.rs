//! Composite operations with hand-written backward passes.
//!
//! Each of these could be spelled with primitive ops, but fusing keeps the
//! tape short and lets the forward arithmetic be shared with the tape-free
//! streaming code in [`crate::nn::kernels`].

use super::{add_into, slot, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::kernels::{self, CellBatch, CellSaved, NUM_GATES};
use crate::nn::Pooling;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) struct LayerNormSaved<T> {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Block layout of a batched causal self-attention call: each segment is an
/// independent sequence occupying rows `start..start + len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub segments: Vec<(usize, usize)>,
    pub heads: usize,
}

impl AttentionSpec {
    /// Number of attention weights (one `len x len` block per segment and
    /// head); also the size of a dropout mask.
    pub fn weight_count(&self) -> usize {
        self.segments.iter().map(|&(_, len)| len * len).sum::<usize>() * self.heads
    }

    fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.segments.len() * self.heads);
        let mut acc = 0;
        for &(_, len) in &self.segments {
            for _ in 0..self.heads {
                offs.push(acc);
                acc += len * len;
            }
        }
        offs
    }
}

pub(crate) struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    spec: AttentionSpec,
    offsets: Vec<usize>,
    weights: Vec<T>,
    mask: Option<Vec<T>>,
}

pub(crate) struct CrossEntropySaved<T> {
    logits: Var,
    targets: Vec<usize>,
    probs: Vec<T>,
}

/// Where the inputs of one grid cell come from.
///
/// `left` and `below` index rows of the previous anti-diagonal (`None` is
/// the zero boundary); `h_row`/`s_row` index the projected encoder states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellLink {
    pub left: Option<usize>,
    pub below: Option<usize>,
    pub h_row: usize,
    pub s_row: usize,
}

pub(crate) struct GridDiagSaved<T> {
    prev: Option<Var>,
    hw: Var,
    sw: Var,
    bias: Var,
    uv: Var,
    links: Vec<CellLink>,
    dc: usize,
    zz: Vec<T>,
    c_left: Vec<T>,
    c_below: Vec<T>,
    saved: CellSaved<T>,
}

pub(crate) struct GridPoolSaved {
    states: Vec<Var>,
    groups: Vec<Vec<(usize, usize)>>,
    mode: Pooling,
    dc: usize,
    /// For max pooling: chosen member per (group, coordinate).
    chosen: Vec<u32>,
}

/// Gathers `[z_left | z_below]`, `c_left`, `c_below` for a set of cells from
/// the previous diagonal's `[z | c]` rows.
pub(crate) fn gather_predecessors<T: Scalar>(
    prev: Option<&[T]>,
    links: &[CellLink],
    dc: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = links.len();
    let mut zz = vec![T::zero(); n * 2 * dc];
    let mut cl = vec![T::zero(); n * dc];
    let mut cb = vec![T::zero(); n * dc];
    if let Some(p) = prev {
        for (r, link) in links.iter().enumerate() {
            if let Some(l) = link.left {
                let row = &p[l * 2 * dc..(l + 1) * 2 * dc];
                zz[r * 2 * dc..r * 2 * dc + dc].copy_from_slice(&row[..dc]);
                cl[r * dc..(r + 1) * dc].copy_from_slice(&row[dc..]);
            }
            if let Some(b) = link.below {
                let row = &p[b * 2 * dc..(b + 1) * 2 * dc];
                zz[r * 2 * dc + dc..(r + 1) * 2 * dc].copy_from_slice(&row[..dc]);
                cb[r * dc..(r + 1) * dc].copy_from_slice(&row[dc..]);
            }
        }
    }
    (zz, cl, cb)
}

impl<T: Scalar> Tape<T> {
    /// Row-wise layer normalization with learned gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let s = kernels::layer_norm_row(
                xv.row(r),
                gv.data(),
                bv.data(),
                eps,
                &mut xhat[r * d..(r + 1) * d],
                out.row_mut(r),
            );
            inv_std.push(s);
        }
        let saved = LayerNormSaved {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", out, Op::LayerNorm(Box::new(saved)), &[x, gain, bias])
    }

    /// Multi-head scaled dot-product attention where position `t` of each
    /// segment attends to positions `0..=t` of the same segment only.
    ///
    /// `dropout_mask`, when given, multiplies the attention weights and must
    /// have [`AttentionSpec::weight_count`] entries.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        dropout_mask: Option<Vec<T>>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
            return Err(Error::shape("causal_attention", qv.shape(), kv.shape()));
        }
        let dm = qv.cols();
        if spec.heads == 0 || dm % spec.heads != 0 {
            return Err(Error::Precondition(format!(
                "model width {dm} is not divisible by {} heads",
                spec.heads
            )));
        }
        let covered: usize = spec.segments.iter().map(|s| s.1).sum();
        if spec.segments.iter().any(|&(s, l)| s + l > qv.rows()) || covered != qv.rows() {
            return Err(Error::Precondition("attention segments do not tile the input".into()));
        }
        if let Some(m) = &dropout_mask {
            if m.len() != spec.weight_count() {
                return Err(Error::shape("attention mask", &[m.len()], &[spec.weight_count()]));
            }
        }
        let dh = dm / spec.heads;
        let offsets = spec.offsets();
        let mut weights = vec![T::zero(); spec.weight_count()];
        let mut out = Tensor::zeros(qv.shape());
        let mut scratch = Vec::new();
        for (si, &(start, len)) in spec.segments.iter().enumerate() {
            let keys = &kv.data()[start * dm..(start + len) * dm];
            let vals = &vv.data()[start * dm..(start + len) * dm];
            for h in 0..spec.heads {
                let base = offsets[si * spec.heads + h];
                for t in 0..len {
                    let w = &mut weights[base + t * len..base + (t + 1) * len];
                    kernels::attention_weights_row(qv.row(start + t), keys, dm, h * dh, dh, t, w);
                    let used: &[T] = match &dropout_mask {
                        Some(m) => {
                            scratch.clear();
                            let mrow = &m[base + t * len..base + (t + 1) * len];
                            scratch.extend(w.iter().zip(mrow).map(|(&a, &b)| a * b));
                            &scratch
                        }
                        None => w,
                    };
                    kernels::attention_combine_row(used, vals, dm, h * dh, dh, t, out.row_mut(start + t));
                }
            }
        }
        let saved = AttentionSaved {
            q,
            k,
            v,
            spec,
            offsets,
            weights,
            mask: dropout_mask,
        };
        self.push("causal_attention", out, Op::Attention(Box::new(saved)), &[q, k, v])
    }

    /// Materialized (pre-dropout) attention weights of an attention node, one
    /// `len x len` matrix per (segment, head).
    pub fn attention_weights(&self, node: Var) -> Option<Vec<Tensor<T>>> {
        match &self.nodes[node.0].op {
            Op::Attention(s) => {
                let mut mats = Vec::new();
                for (si, &(_, len)) in s.spec.segments.iter().enumerate() {
                    for h in 0..s.spec.heads {
                        let base = s.offsets[si * s.spec.heads + h];
                        let data = s.weights[base..base + len * len].to_vec();
                        mats.push(Tensor::matrix(len, len, data).ok()?);
                    }
                }
                Some(mats)
            }
            _ => None,
        }
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let v = lv.cols();
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    size: v,
                });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp()).ln();
            total = total - (row[t] - max - lse);
            for x in row.iter_mut() {
                *x = (*x - max - lse).exp();
            }
        }
        let saved = CrossEntropySaved {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy(Box::new(saved)),
            &[logits],
        )
    }

    /// One anti-diagonal of the 2D-LSTM grid as a single batched step.
    ///
    /// `hw`/`sw` hold the source/target encoder states already multiplied by
    /// the input halves of the packed gate weights (`rows x 5dc`), `uv` is the
    /// packed recurrent matrix `[U; V]` (`2dc x 5dc`) and `prev` the `[z | c]`
    /// rows of the previous diagonal. The output has one `[z | c]` row per
    /// link.
    pub fn grid_diag(
        &mut self,
        prev: Option<Var>,
        hw: Var,
        sw: Var,
        bias: Var,
        uv: Var,
        links: Vec<CellLink>,
    ) -> Result<Var> {
        let uvv = self.value(uv);
        if uvv.rank() != 2 || uvv.rows() % 2 != 0 || uvv.cols() != NUM_GATES * uvv.rows() / 2 {
            return Err(Error::shape("grid_diag recurrent matrix", uvv.shape(), &[]));
        }
        let dc = uvv.rows() / 2;
        let w5 = NUM_GATES * dc;
        let (hwv, swv, bv) = (self.value(hw), self.value(sw), self.value(bias));
        if hwv.cols() != w5 || swv.cols() != w5 || bv.len() != w5 {
            return Err(Error::shape("grid_diag projections", hwv.shape(), swv.shape()));
        }
        for l in &links {
            if l.h_row >= hwv.rows() || l.s_row >= swv.rows() {
                return Err(Error::Index {
                    what: "grid_diag encoder row",
                    index: l.h_row.max(l.s_row),
                    size: hwv.rows().min(swv.rows()),
                });
            }
        }
        let prev_data = match prev {
            Some(p) => {
                let pv = self.value(p);
                if pv.cols() != 2 * dc {
                    return Err(Error::shape("grid_diag previous state", pv.shape(), &[2 * dc]));
                }
                let n = pv.rows();
                if links.iter().any(|l| l.left.is_some_and(|x| x >= n) || l.below.is_some_and(|x| x >= n)) {
                    return Err(Error::Precondition("grid_diag link outside previous diagonal".into()));
                }
                Some(pv.data())
            }
            None => {
                if links.iter().any(|l| l.left.is_some() || l.below.is_some()) {
                    return Err(Error::Precondition("grid_diag link without previous diagonal".into()));
                }
                None
            }
        };
        let (zz, c_left, c_below) = gather_predecessors(prev_data, &links, dc);
        let batch = CellBatch {
            dc,
            hw_rows: links.iter().map(|l| hwv.row(l.h_row)).collect(),
            sw_rows: links.iter().map(|l| swv.row(l.s_row)).collect(),
            bias: bv.data(),
            uv: uvv.data(),
            zz: &zz,
            c_left: &c_left,
            c_below: &c_below,
        };
        let mut out = Tensor::zeros(&[links.len(), 2 * dc]);
        let saved = kernels::cell_forward(&batch, out.data_mut());
        let saved = GridDiagSaved {
            prev,
            hw,
            sw,
            bias,
            uv,
            links,
            dc,
            zz,
            c_left,
            c_below,
            saved,
        };
        let mut inputs = vec![hw, sw, bias, uv];
        inputs.extend(prev);
        self.push("grid_diag", out, Op::GridDiag(Box::new(saved)), &inputs)
    }

    /// Pools the hidden halves `z` of grid cells into one row per group.
    ///
    /// A group lists `(state index, row)` pairs in axis order; max pooling
    /// breaks ties towards the earliest member.
    pub fn grid_pool(&mut self, states: &[Var], groups: Vec<Vec<(usize, usize)>>, mode: Pooling) -> Result<Var> {
        let first = states
            .first()
            .ok_or_else(|| Error::Precondition("grid_pool without states".into()))?;
        let dc = self.value(*first).cols() / 2;
        let mut out = Tensor::zeros(&[groups.len(), dc]);
        let mut chosen = Vec::new();
        if mode == Pooling::Max {
            chosen.resize(groups.len() * dc, 0u32);
        }
        for (gi, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Precondition("pooling over an empty axis".into()));
            }
            for &(s, r) in members {
                let v = self.value(*states.get(s).ok_or(Error::Index {
                    what: "grid_pool state",
                    index: s,
                    size: states.len(),
                })?);
                if r >= v.rows() || v.cols() != 2 * dc {
                    return Err(Error::Index {
                        what: "grid_pool row",
                        index: r,
                        size: v.rows(),
                    });
                }
            }
            let z = |m: usize| {
                let (s, r) = members[m];
                &self.value(states[s]).row(r)[..dc]
            };
            let o = out.row_mut(gi);
            match mode {
                Pooling::Max => {
                    o.copy_from_slice(z(0));
                    for m in 1..members.len() {
                        let zm = z(m);
                        for k in 0..dc {
                            if zm[k] > o[k] {
                                o[k] = zm[k];
                                chosen[gi * dc + k] = m as u32;
                            }
                        }
                    }
                }
                Pooling::Average => {
                    for m in 0..members.len() {
                        add_into(o, z(m));
                    }
                    let n = T::from_usize(members.len()).unwrap();
                    o.iter_mut().for_each(|x| *x = *x / n);
                }
                Pooling::Last => o.copy_from_slice(z(members.len() - 1)),
            }
        }
        let saved = GridPoolSaved {
            states: states.to_vec(),
            groups,
            mode,
            dc,
            chosen,
        };
        self.push("grid_pool", out, Op::GridPool(Box::new(saved)), states)
    }
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    tape: &Tape<T>,
    s: &LayerNormSaved<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let d = g.cols();
    let rows = g.rows();
    let dn = T::from_usize(d).unwrap();
    let gain = tape.value(s.gain).data().to_vec();
    if tape.requires_grad(s.gain) || tape.requires_grad(s.bias) {
        let mut dgain = vec![T::zero(); d];
        let mut dbias = vec![T::zero(); d];
        for r in 0..rows {
            for k in 0..d {
                let gy = g.data()[r * d + k];
                dgain[k] = dgain[k] + gy * s.xhat[r * d + k];
                dbias[k] = dbias[k] + gy;
            }
        }
        if tape.requires_grad(s.gain) {
            add_into(slot(grads, s.gain, tape.shape(s.gain)), &dgain);
        }
        if tape.requires_grad(s.bias) {
            add_into(slot(grads, s.bias, tape.shape(s.bias)), &dbias);
        }
    }
    if tape.requires_grad(s.x) {
        let dx = slot(grads, s.x, tape.shape(s.x));
        for r in 0..rows {
            let xh = &s.xhat[r * d..(r + 1) * d];
            let gy = &g.data()[r * d..(r + 1) * d];
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for k in 0..d {
                let dxh = gy[k] * gain[k];
                mean_d = mean_d + dxh;
                mean_dx = mean_dx + dxh * xh[k];
            }
            mean_d = mean_d / dn;
            mean_dx = mean_dx / dn;
            for k in 0..d {
                let dxh = gy[k] * gain[k];
                dx[r * d + k] = dx[r * d + k] + s.inv_std[r] * (dxh - mean_d - xh[k] * mean_dx);
            }
        }
    }
}

pub(crate) fn attention_backward<T: Scalar>(
    tape: &Tape<T>,
    s: &AttentionSaved<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (qv, kv, vv) = (tape.value(s.q), tape.value(s.k), tape.value(s.v));
    let dm = qv.cols();
    let heads = s.spec.heads;
    let dh = dm / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); qv.len()];
    let mut dk = vec![T::zero(); kv.len()];
    let mut dv = vec![T::zero(); vv.len()];
    let mut dw = Vec::new();
    for (si, &(start, len)) in s.spec.segments.iter().enumerate() {
        for h in 0..heads {
            let base = s.offsets[si * heads + h];
            let off = h * dh;
            for t in 0..len {
                let w = &s.weights[base + t * len..base + (t + 1) * len];
                let mask = s.mask.as_ref().map(|m| &m[base + t * len..base + (t + 1) * len]);
                let go = &g.data()[(start + t) * dm + off..(start + t) * dm + off + dh];
                dw.clear();
                for u in 0..=t {
                    let vu = &vv.data()[(start + u) * dm + off..(start + u) * dm + off + dh];
                    let mut dwu = T::zero();
                    for d in 0..dh {
                        dwu = dwu + go[d] * vu[d];
                    }
                    let m = mask.map_or(T::one(), |m| m[u]);
                    let wm = w[u] * m;
                    for d in 0..dh {
                        let p = (start + u) * dm + off + d;
                        dv[p] = dv[p] + wm * go[d];
                    }
                    dw.push(dwu * m);
                }
                let dot = (0..=t).fold(T::zero(), |a, u| a + w[u] * dw[u]);
                let qt = &qv.data()[(start + t) * dm + off..(start + t) * dm + off + dh];
                for u in 0..=t {
                    let ds = w[u] * (dw[u] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for d in 0..dh {
                        let pk = (start + u) * dm + off + d;
                        let pq = (start + t) * dm + off + d;
                        dq[pq] = dq[pq] + ds * kv.data()[pk];
                        dk[pk] = dk[pk] + ds * qt[d];
                    }
                }
            }
        }
    }
    for (var, d) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
        if tape.requires_grad(var) {
            add_into(slot(grads, var, tape.shape(var)), &d);
        }
    }
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    tape: &Tape<T>,
    s: &CrossEntropySaved<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    if !tape.requires_grad(s.logits) {
        return;
    }
    let gs = g.data()[0];
    let v = tape.value(s.logits).cols();
    let dl = slot(grads, s.logits, tape.shape(s.logits));
    for (r, &t) in s.targets.iter().enumerate() {
        for c in 0..v {
            let p = s.probs[r * v + c];
            let y = if c == t { T::one() } else { T::zero() };
            dl[r * v + c] = dl[r * v + c] + gs * (p - y);
        }
    }
}

pub(crate) fn grid_diag_backward<T: Scalar>(
    tape: &Tape<T>,
    s: &GridDiagSaved<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let dc = s.dc;
    let w5 = NUM_GATES * dc;
    let (hwv, swv, bv, uvv) = (tape.value(s.hw), tape.value(s.sw), tape.value(s.bias), tape.value(s.uv));
    let batch = CellBatch {
        dc,
        hw_rows: s.links.iter().map(|l| hwv.row(l.h_row)).collect(),
        sw_rows: s.links.iter().map(|l| swv.row(l.s_row)).collect(),
        bias: bv.data(),
        uv: uvv.data(),
        zz: &s.zz,
        c_left: &s.c_left,
        c_below: &s.c_below,
    };
    let cg = kernels::cell_backward(&batch, &s.saved, g.data());
    let n = s.links.len();
    if tape.requires_grad(s.hw) {
        let d = slot(grads, s.hw, hwv.shape());
        for (r, l) in s.links.iter().enumerate() {
            add_into(&mut d[l.h_row * w5..(l.h_row + 1) * w5], &cg.d_pre[r * w5..(r + 1) * w5]);
        }
    }
    if tape.requires_grad(s.sw) {
        let d = slot(grads, s.sw, swv.shape());
        for (r, l) in s.links.iter().enumerate() {
            add_into(&mut d[l.s_row * w5..(l.s_row + 1) * w5], &cg.d_pre[r * w5..(r + 1) * w5]);
        }
    }
    if tape.requires_grad(s.bias) {
        let d = slot(grads, s.bias, bv.shape());
        for r in 0..n {
            add_into(d, &cg.d_pre[r * w5..(r + 1) * w5]);
        }
    }
    if tape.requires_grad(s.uv) {
        let d = slot(grads, s.uv, uvv.shape());
        // d_uv += zz^T * d_pre
        T::gemm(
            2 * dc,
            n,
            w5,
            T::one(),
            &s.zz,
            (1, (2 * dc) as isize),
            &cg.d_pre,
            (w5 as isize, 1),
            T::one(),
            d,
            (w5 as isize, 1),
        );
    }
    if let Some(prev) = s.prev {
        if tape.requires_grad(prev) {
            let d = slot(grads, prev, tape.shape(prev));
            for (r, l) in s.links.iter().enumerate() {
                if let Some(left) = l.left {
                    let row = &mut d[left * 2 * dc..(left + 1) * 2 * dc];
                    add_into(&mut row[..dc], &cg.d_zz[r * 2 * dc..r * 2 * dc + dc]);
                    add_into(&mut row[dc..], &cg.d_c_left[r * dc..(r + 1) * dc]);
                }
                if let Some(below) = l.below {
                    let row = &mut d[below * 2 * dc..(below + 1) * 2 * dc];
                    add_into(&mut row[..dc], &cg.d_zz[r * 2 * dc + dc..(r + 1) * 2 * dc]);
                    add_into(&mut row[dc..], &cg.d_c_below[r * dc..(r + 1) * dc]);
                }
            }
        }
    }
}

pub(crate) fn grid_pool_backward<T: Scalar>(
    tape: &Tape<T>,
    s: &GridPoolSaved,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let dc = s.dc;
    for (gi, members) in s.groups.iter().enumerate() {
        let go = &g.data()[gi * dc..(gi + 1) * dc];
        match s.mode {
            Pooling::Max => {
                for k in 0..dc {
                    let (si, r) = members[s.chosen[gi * dc + k] as usize];
                    let var = s.states[si];
                    if tape.requires_grad(var) {
                        let d = slot(grads, var, tape.shape(var));
                        d[r * 2 * dc + k] = d[r * 2 * dc + k] + go[k];
                    }
                }
            }
            Pooling::Average => {
                let n = T::from_usize(members.len()).unwrap();
                for &(si, r) in members {
                    let var = s.states[si];
                    if tape.requires_grad(var) {
                        let d = slot(grads, var, tape.shape(var));
                        for k in 0..dc {
                            d[r * 2 * dc + k] = d[r * 2 * dc + k] + go[k] / n;
                        }
                    }
                }
            }
            Pooling::Last => {
                let (si, r) = members[members.len() - 1];
                let var = s.states[si];
                if tape.requires_grad(var) {
                    add_into(&mut slot(grads, var, tape.shape(var))[r * 2 * dc..r * 2 * dc + dc], go);
                }
            }
        }
    }
}
