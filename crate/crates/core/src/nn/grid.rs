//! Two-dimensional LSTM over the (source x target) grid.
//!
//! Cell `(j, i)` reads `[h_{j-1}; s_{i-1}]` together with its left
//! neighbour `(j-1, i)` and the cell below `(j, i-1)`:
//!
//! ```text
//! i, f, λ, o = sigmoid(W x + U z_left + V z_below + b)
//! g          = tanh(W_g x + U_g z_left + V_g z_below + b_g)
//! c          = f ⊙ (λ ⊙ c_left + (1 - λ) ⊙ c_below) + i ⊙ g
//! z          = o ⊙ tanh(c)
//! ```
//!
//! Row and column 0 are zero boundaries. Because a cell only needs its left
//! and lower neighbours, the grid can be evaluated in several orders that all
//! produce the same states:
//!
//! * [`forward_naive`]: one cell at a time (`J * I` sequential steps), built
//!   from primitive tape ops; used as the reference.
//! * [`forward_diagonal`]: anti-diagonal wavefront, `J + I - 1` sequential
//!   phases, each phase a single batched matmul over all of its cells.
//! * [`RowStreamer`]: one target row at a time, for source-to-target decoding.
//! * [`ColumnStreamer`]: one source column at a time, for target-to-source
//!   decoding.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{CellLink, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::encoder::{row_matmul, EncodedSequence};
use crate::nn::kernels::{self, CellBatch, NUM_GATES};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gate names in packed order.
pub const GATE_NAMES: [&str; NUM_GATES] = ["input", "forget", "lambda", "output", "candidate"];

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    /// Width of each encoder state; the cell input is twice this.
    pub d_model: usize,
    pub d_cell: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    /// `2 d_model x d_cell`, acting on `[h; s]`.
    pub w: ParamId,
    /// `d_cell x d_cell`, acting on the left (horizontal) predecessor.
    pub u: ParamId,
    /// `d_cell x d_cell`, acting on the lower (vertical) predecessor.
    pub v: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TwoDLSTMParams {
    pub config: GridConfig,
    /// Indexed by [`kernels::GATE_INPUT`] and friends.
    pub gates: [GateParams; NUM_GATES],
}

/// Gate matrices concatenated for batched evaluation.
#[derive(Clone, Debug)]
pub struct PackedGrid<T> {
    pub d_model: usize,
    pub d_cell: usize,
    /// `d_model x 5dc`: source half of the input weights.
    pub w_src: Tensor<T>,
    /// `d_model x 5dc`: target half of the input weights.
    pub w_tgt: Tensor<T>,
    /// `2dc x 5dc`: `[U; V]`.
    pub uv: Tensor<T>,
    pub bias: Vec<T>,
}

/// Tape handles of a [`PackedGrid`].
#[derive(Clone, Copy, Debug)]
pub struct TapePacked {
    pub w_src: Var,
    pub w_tgt: Var,
    pub uv: Var,
    pub bias: Var,
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

impl TwoDLSTMParams {
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, config: GridConfig, rng: &mut R) -> Self {
        let (dm, dc) = (config.d_model, config.d_cell);
        let w_bound = (6.0 / (2 * dm + dc) as f64).sqrt();
        let r_bound = (3.0 / dc as f64).sqrt() * 0.5;
        let gates = std::array::from_fn(|g| {
            let name = GATE_NAMES[g];
            let bias = if g == kernels::GATE_FORGET { T::one() } else { T::zero() };
            GateParams {
                w: store.add(format!("{prefix}.{name}.w"), uniform(rng, 2 * dm, dc, w_bound)),
                u: store.add(format!("{prefix}.{name}.u"), uniform(rng, dc, dc, r_bound)),
                v: store.add(format!("{prefix}.{name}.v"), uniform(rng, dc, dc, r_bound)),
                b: store.add(format!("{prefix}.{name}.b"), Tensor::full(&[dc], bias)),
            }
        });
        Self { config, gates }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.gates.iter().flat_map(|g| [g.w, g.u, g.v, g.b]).collect()
    }

    /// Weight matrices only (biases excluded); the L2 penalty applies here.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.gates.iter().flat_map(|g| [g.w, g.u, g.v]).collect()
    }

    pub fn pack<T: Scalar>(&self, store: &ParamStore<T>) -> PackedGrid<T> {
        let (dm, dc) = (self.config.d_model, self.config.d_cell);
        let w5 = NUM_GATES * dc;
        let mut w_src = Tensor::zeros(&[dm, w5]);
        let mut w_tgt = Tensor::zeros(&[dm, w5]);
        let mut uv = Tensor::zeros(&[2 * dc, w5]);
        let mut bias = vec![T::zero(); w5];
        for (g, gp) in self.gates.iter().enumerate() {
            let w = store.value(gp.w);
            for r in 0..dm {
                w_src.row_mut(r)[g * dc..(g + 1) * dc].copy_from_slice(w.row(r));
                w_tgt.row_mut(r)[g * dc..(g + 1) * dc].copy_from_slice(w.row(dm + r));
            }
            let (u, v) = (store.value(gp.u), store.value(gp.v));
            for r in 0..dc {
                uv.row_mut(r)[g * dc..(g + 1) * dc].copy_from_slice(u.row(r));
                uv.row_mut(dc + r)[g * dc..(g + 1) * dc].copy_from_slice(v.row(r));
            }
            bias[g * dc..(g + 1) * dc].copy_from_slice(store.value(gp.b).data());
        }
        PackedGrid {
            d_model: dm,
            d_cell: dc,
            w_src,
            w_tgt,
            uv,
            bias,
        }
    }

    /// Packs on a tape so gradients flow back to the per-gate parameters.
    pub fn pack_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<TapePacked> {
        let dm = self.config.d_model;
        let ws: Vec<Var> = self.gates.iter().map(|g| tape.param(store, g.w)).collect();
        let us: Vec<Var> = self.gates.iter().map(|g| tape.param(store, g.u)).collect();
        let vs: Vec<Var> = self.gates.iter().map(|g| tape.param(store, g.v)).collect();
        let bs: Vec<Var> = self.gates.iter().map(|g| tape.param(store, g.b)).collect();
        let w = tape.concat(&ws)?;
        let w_src = tape.slice_rows(w, 0, dm)?;
        let w_tgt = tape.slice_rows(w, dm, 2 * dm)?;
        let u = tape.concat(&us)?;
        let v = tape.concat(&vs)?;
        let uv = tape.concat_rows(&[u, v])?;
        let bias = tape.concat(&bs)?;
        Ok(TapePacked {
            w_src,
            w_tgt,
            uv,
            bias,
        })
    }
}

/// One cell evaluated with primitive tape ops, exactly as the gate equations
/// read. Returns `(z, c)`.
#[allow(clippy::too_many_arguments)]
pub fn cell_step_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TwoDLSTMParams,
    store: &ParamStore<T>,
    x: Var,
    z_left: Var,
    z_below: Var,
    c_left: Var,
    c_below: Var,
) -> Result<(Var, Var)> {
    let (dm, dc) = (params.config.d_model, params.config.d_cell);
    let xs = tape.shape(x).to_vec();
    if xs != [1, 2 * dm] {
        return Err(Error::shape("cell_step input", &xs, &[1, 2 * dm]));
    }
    for v in [z_left, z_below, c_left, c_below] {
        if tape.shape(v) != [1, dc] {
            return Err(Error::shape("cell_step state", tape.shape(v), &[1, dc]));
        }
    }
    let mut pre = Vec::with_capacity(NUM_GATES);
    for gp in &params.gates {
        let (w, u, v, b) = (
            tape.param(store, gp.w),
            tape.param(store, gp.u),
            tape.param(store, gp.v),
            tape.param(store, gp.b),
        );
        let a = tape.matmul(x, w)?;
        let l = tape.matmul(z_left, u)?;
        let r = tape.matmul(z_below, v)?;
        let s = tape.add(a, l)?;
        let s = tape.add(s, r)?;
        pre.push(tape.add(s, b)?);
    }
    let ig = tape.sigmoid(pre[kernels::GATE_INPUT])?;
    let fg = tape.sigmoid(pre[kernels::GATE_FORGET])?;
    let lam = tape.sigmoid(pre[kernels::GATE_LAMBDA])?;
    let og = tape.sigmoid(pre[kernels::GATE_OUTPUT])?;
    let g = tape.tanh(pre[kernels::GATE_CANDIDATE])?;
    // λ c_left + (1 - λ) c_below = c_below + λ (c_left - c_below)
    let diff = tape.sub(c_left, c_below)?;
    let mixed = tape.mul(lam, diff)?;
    let mixed = tape.add(c_below, mixed)?;
    let keep = tape.mul(fg, mixed)?;
    let write = tape.mul(ig, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let z = tape.mul(og, tc)?;
    Ok((z, c))
}

/// Tape-free single cell: `x` is `[h_{j-1}; s_{i-1}]`.
pub fn cell_step<T: Scalar>(
    params: &TwoDLSTMParams,
    store: &ParamStore<T>,
    x: &[T],
    z_left: &[T],
    z_below: &[T],
    c_left: &[T],
    c_below: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let mut tape = Tape::new();
    let row = |tape: &mut Tape<T>, v: &[T]| -> Result<Var> { Ok(tape.constant(Tensor::matrix(1, v.len(), v.to_vec())?)) };
    let x = row(&mut tape, x)?;
    let zl = row(&mut tape, z_left)?;
    let zb = row(&mut tape, z_below)?;
    let cl = row(&mut tape, c_left)?;
    let cb = row(&mut tape, c_below)?;
    let (z, c) = cell_step_on_tape(&mut tape, params, store, x, zl, zb, cl, cb)?;
    Ok((tape.value(z).data().to_vec(), tape.value(c).data().to_vec()))
}

/// Hidden and cell states of a whole grid, indexed `[j][i]` with `j` in
/// `0..=J` (source) and `i` in `0..=I` (target).
#[derive(Clone, Debug, PartialEq)]
pub struct GridState<T> {
    pub src_len: usize,
    pub tgt_len: usize,
    pub d_cell: usize,
    /// `(J+1) x (I+1) x d_cell`.
    pub z: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> GridState<T> {
    pub fn zeros(src_len: usize, tgt_len: usize, d_cell: usize) -> Self {
        let shape = [src_len + 1, tgt_len + 1, d_cell];
        Self {
            src_len,
            tgt_len,
            d_cell,
            z: Tensor::zeros(&shape),
            c: Tensor::zeros(&shape),
        }
    }

    fn offset(&self, j: usize, i: usize) -> usize {
        (j * (self.tgt_len + 1) + i) * self.d_cell
    }

    pub fn z_at(&self, j: usize, i: usize) -> &[T] {
        let o = self.offset(j, i);
        &self.z.data()[o..o + self.d_cell]
    }

    pub fn c_at(&self, j: usize, i: usize) -> &[T] {
        let o = self.offset(j, i);
        &self.c.data()[o..o + self.d_cell]
    }

    pub fn set(&mut self, j: usize, i: usize, z: &[T], c: &[T]) {
        let o = self.offset(j, i);
        let d = self.d_cell;
        self.z.data_mut()[o..o + d].copy_from_slice(z);
        self.c.data_mut()[o..o + d].copy_from_slice(c);
    }

    /// Row `i` (fixed target position) as a streaming state.
    pub fn row(&self, i: usize) -> Frontier<T> {
        let mut f = Frontier::zeros(self.src_len, self.d_cell);
        for j in 0..=self.src_len {
            f.set(j, self.z_at(j, i), self.c_at(j, i));
        }
        f
    }

    /// Column `j` (fixed source position) as a streaming state.
    pub fn column(&self, j: usize) -> Frontier<T> {
        let mut f = Frontier::zeros(self.tgt_len, self.d_cell);
        for i in 0..=self.tgt_len {
            f.set(i, self.z_at(j, i), self.c_at(j, i));
        }
        f
    }

    /// Largest absolute difference over both `z` and `c`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.z.max_abs_diff(&other.z)?.max(self.c.max_abs_diff(&other.c)?))
    }
}

/// One row (or column) of grid states including the zero boundary at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Frontier<T> {
    pub d_cell: usize,
    /// `(len + 1) x d_cell`.
    pub z: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> Frontier<T> {
    /// The all-zero row 0 / column 0.
    pub fn zeros(len: usize, d_cell: usize) -> Self {
        Self {
            d_cell,
            z: vec![T::zero(); (len + 1) * d_cell],
            c: vec![T::zero(); (len + 1) * d_cell],
        }
    }

    /// Number of interior cells.
    pub fn len(&self) -> usize {
        self.z.len() / self.d_cell - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn z_at(&self, k: usize) -> &[T] {
        &self.z[k * self.d_cell..(k + 1) * self.d_cell]
    }

    pub fn c_at(&self, k: usize) -> &[T] {
        &self.c[k * self.d_cell..(k + 1) * self.d_cell]
    }

    fn set(&mut self, k: usize, z: &[T], c: &[T]) {
        let d = self.d_cell;
        self.z[k * d..(k + 1) * d].copy_from_slice(z);
        self.c[k * d..(k + 1) * d].copy_from_slice(c);
    }

    /// Interior hidden states `1..=len` as a matrix (for pooling).
    pub fn interior_z(&self) -> Tensor<T> {
        Tensor::matrix(self.len(), self.d_cell, self.z[self.d_cell..].to_vec()).expect("sized")
    }
}

/// Sequential phase count and cell count of one grid evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleStats {
    pub phases: usize,
    pub cells: usize,
}

fn grid_extent<T: Scalar>(seq: &EncodedSequence<T>, d_model: usize, what: &str) -> Result<usize> {
    if seq.states.rank() != 2 || seq.states.cols() != d_model {
        return Err(Error::shape("grid input", seq.states.shape(), &[d_model]));
    }
    if seq.states.rows() < 2 {
        return Err(Error::Precondition(format!("{what} sequence is empty (needs BOS plus at least one position)")));
    }
    Ok(seq.states.rows() - 1)
}

/// Project the first `n` rows of encoder states through one input half.
fn project<T: Scalar>(states: &Tensor<T>, n: usize, w: &Tensor<T>) -> Tensor<T> {
    let (k, w5) = (w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&[n, w5]);
    T::gemm(
        n,
        k,
        w5,
        T::one(),
        states.data(),
        (k as isize, 1),
        w.data(),
        (w5 as isize, 1),
        T::zero(),
        out.data_mut(),
        (w5 as isize, 1),
    );
    out
}

/// Reference evaluation, one cell per sequential step through
/// [`cell_step_on_tape`].
pub fn forward_naive<T: Scalar>(
    params: &TwoDLSTMParams,
    store: &ParamStore<T>,
    src: &EncodedSequence<T>,
    tgt: &EncodedSequence<T>,
) -> Result<(GridState<T>, ScheduleStats)> {
    let dm = params.config.d_model;
    let dc = params.config.d_cell;
    let jn = grid_extent(src, dm, "source")?;
    let inn = grid_extent(tgt, dm, "target")?;
    let mut grid = GridState::zeros(jn, inn, dc);
    let mut steps = 0;
    for j in 1..=jn {
        for i in 1..=inn {
            let mut x = src.states.row(j - 1).to_vec();
            x.extend_from_slice(tgt.states.row(i - 1));
            let (z, c) = cell_step(
                params,
                store,
                &x,
                grid.z_at(j - 1, i),
                grid.z_at(j, i - 1),
                grid.c_at(j - 1, i),
                grid.c_at(j, i - 1),
            )?;
            grid.set(j, i, &z, &c);
            steps += 1;
        }
    }
    Ok((
        grid,
        ScheduleStats {
            phases: steps,
            cells: steps,
        },
    ))
}

/// Cells `(j, i)` on anti-diagonal `j + i = d`, ordered by `j`.
fn diagonal_cells(d: usize, jn: usize, inn: usize) -> std::ops::RangeInclusive<usize> {
    let lo = if d > inn { d - inn } else { 1 };
    let hi = jn.min(d - 1);
    lo..=hi
}

/// Links of every cell on diagonal `d` into diagonal `d - 1`.
fn diagonal_links(d: usize, jn: usize, inn: usize, h_base: usize, s_base: usize) -> Vec<(usize, usize, CellLink)> {
    let prev_lo = if d > 2 { *diagonal_cells(d - 1, jn, inn).start() } else { 0 };
    diagonal_cells(d, jn, inn)
        .map(|j| {
            let i = d - j;
            let link = CellLink {
                left: (j > 1).then(|| j - 1 - prev_lo),
                below: (i > 1).then(|| j - prev_lo),
                h_row: h_base + j - 1,
                s_row: s_base + i - 1,
            };
            (j, i, link)
        })
        .collect()
}

/// Anti-diagonal wavefront evaluation.
///
/// Every diagonal is one phase: its cells are gathered into one batch and
/// evaluated with a single matmul against the packed recurrent weights. When
/// `workers > 1` the batch is split into row chunks processed in parallel;
/// rows are independent so the result does not depend on the worker count.
pub fn forward_diagonal<T: Scalar>(
    params: &TwoDLSTMParams,
    store: &ParamStore<T>,
    src: &EncodedSequence<T>,
    tgt: &EncodedSequence<T>,
    workers: usize,
) -> Result<(GridState<T>, ScheduleStats)> {
    let packed = params.pack(store);
    forward_diagonal_packed(&packed, src, tgt, workers)
}

pub fn forward_diagonal_packed<T: Scalar>(
    packed: &PackedGrid<T>,
    src: &EncodedSequence<T>,
    tgt: &EncodedSequence<T>,
    workers: usize,
) -> Result<(GridState<T>, ScheduleStats)> {
    let (dm, dc) = (packed.d_model, packed.d_cell);
    let jn = grid_extent(src, dm, "source")?;
    let inn = grid_extent(tgt, dm, "target")?;
    let hw = project(&src.states, jn, &packed.w_src);
    let sw = project(&tgt.states, inn, &packed.w_tgt);
    let mut grid = GridState::zeros(jn, inn, dc);
    let mut prev: Vec<T> = Vec::new();
    let mut phases = 0;
    let mut cells = 0;
    let chunk_rows = |n: usize| n.div_ceil(workers.max(1)).max(1);
    for d in 2..=jn + inn {
        let entries = diagonal_links(d, jn, inn, 0, 0);
        let links: Vec<CellLink> = entries.iter().map(|e| e.2).collect();
        let prev_ref = (d > 2).then_some(prev.as_slice());
        let (zz, cl, cb) = crate::autodiff::gather_predecessors(prev_ref, &links, dc);
        let n = links.len();
        let mut out = vec![T::zero(); n * 2 * dc];
        let run = |lo: usize, hi: usize, out: &mut [T]| {
            let batch = CellBatch {
                dc,
                hw_rows: links[lo..hi].iter().map(|l| hw.row(l.h_row)).collect(),
                sw_rows: links[lo..hi].iter().map(|l| sw.row(l.s_row)).collect(),
                bias: &packed.bias,
                uv: packed.uv.data(),
                zz: &zz[lo * 2 * dc..hi * 2 * dc],
                c_left: &cl[lo * dc..hi * dc],
                c_below: &cb[lo * dc..hi * dc],
            };
            kernels::cell_forward(&batch, out);
        };
        if workers > 1 && n > 1 {
            let rows = chunk_rows(n);
            out.par_chunks_mut(rows * 2 * dc).enumerate().for_each(|(k, chunk)| {
                let lo = k * rows;
                run(lo, lo + chunk.len() / (2 * dc), chunk);
            });
        } else {
            run(0, n, &mut out);
        }
        for (r, &(j, i, _)) in entries.iter().enumerate() {
            let row = &out[r * 2 * dc..(r + 1) * 2 * dc];
            grid.set(j, i, &row[..dc], &row[dc..]);
        }
        prev = out;
        phases += 1;
        cells += n;
    }
    Ok((grid, ScheduleStats { phases, cells }))
}

/// Source-to-target streaming: computes grid rows one target position at a
/// time for a fixed, fully known source.
#[derive(Clone, Debug)]
pub struct RowStreamer<T> {
    packed: PackedGrid<T>,
    /// `J x 5dc` projections of `h_0 .. h_{J-1}`.
    src_proj: Tensor<T>,
    src_len: usize,
}

impl<T: Scalar> RowStreamer<T> {
    pub fn new(packed: PackedGrid<T>, src: &EncodedSequence<T>) -> Result<Self> {
        let jn = grid_extent(src, packed.d_model, "source")?;
        let src_proj = project(&src.states, jn, &packed.w_src);
        Ok(Self {
            packed,
            src_proj,
            src_len: jn,
        })
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    /// Row 0.
    pub fn initial(&self) -> Frontier<T> {
        Frontier::zeros(self.src_len, self.packed.d_cell)
    }

    /// Next row for each `(s_{i-1}, row i-1)` pair; rows are batched per
    /// source position.
    pub fn step_many(&self, s_prev: &[&[T]], prev_rows: &[&Frontier<T>]) -> Result<Vec<Frontier<T>>> {
        stream_many(&self.packed, &self.src_proj, s_prev, prev_rows, self.src_len, Axis::Row)
    }

    pub fn step(&self, s_prev: &[T], prev_row: &Frontier<T>) -> Result<Frontier<T>> {
        Ok(self.step_many(&[s_prev], &[prev_row])?.remove(0))
    }
}

/// Target-to-source streaming: computes grid columns one source position at
/// a time for a fixed, fully known target.
#[derive(Clone, Debug)]
pub struct ColumnStreamer<T> {
    packed: PackedGrid<T>,
    tgt_proj: Tensor<T>,
    tgt_len: usize,
}

impl<T: Scalar> ColumnStreamer<T> {
    pub fn new(packed: PackedGrid<T>, tgt: &EncodedSequence<T>) -> Result<Self> {
        let inn = grid_extent(tgt, packed.d_model, "target")?;
        let tgt_proj = project(&tgt.states, inn, &packed.w_tgt);
        Ok(Self {
            packed,
            tgt_proj,
            tgt_len: inn,
        })
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt_len
    }

    pub fn initial(&self) -> Frontier<T> {
        Frontier::zeros(self.tgt_len, self.packed.d_cell)
    }

    pub fn step_many(&self, h_prev: &[&[T]], prev_cols: &[&Frontier<T>]) -> Result<Vec<Frontier<T>>> {
        stream_many(&self.packed, &self.tgt_proj, h_prev, prev_cols, self.tgt_len, Axis::Column)
    }

    pub fn step(&self, h_prev: &[T], prev_col: &Frontier<T>) -> Result<Frontier<T>> {
        Ok(self.step_many(&[h_prev], &[prev_col])?.remove(0))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Row,
    Column,
}

/// Shared body of row and column streaming. `fixed_proj` holds the
/// projections of the fully known side, `own` the newest state of the side
/// being generated (one per hypothesis).
fn stream_many<T: Scalar>(
    packed: &PackedGrid<T>,
    fixed_proj: &Tensor<T>,
    own: &[&[T]],
    prev: &[&Frontier<T>],
    len: usize,
    axis: Axis,
) -> Result<Vec<Frontier<T>>> {
    let (dm, dc) = (packed.d_model, packed.d_cell);
    if own.len() != prev.len() {
        return Err(Error::Precondition("one previous frontier per hypothesis".into()));
    }
    for (o, p) in own.iter().zip(prev) {
        if o.len() != dm {
            return Err(Error::shape("streaming own-side state", &[o.len()], &[dm]));
        }
        if p.d_cell != dc || p.len() != len {
            return Err(Error::shape("streaming frontier", &[p.len(), p.d_cell], &[len, dc]));
        }
    }
    let n = own.len();
    let own_w = match axis {
        Axis::Row => &packed.w_tgt,
        Axis::Column => &packed.w_src,
    };
    let own_proj: Vec<Vec<T>> = own.iter().map(|o| row_matmul(o, own_w)).collect();
    let mut next: Vec<Frontier<T>> = (0..n).map(|_| Frontier::zeros(len, dc)).collect();
    let mut zz = vec![T::zero(); n * 2 * dc];
    let mut cl = vec![T::zero(); n * dc];
    let mut cb = vec![T::zero(); n * dc];
    let mut out = vec![T::zero(); n * 2 * dc];
    for k in 1..=len {
        for r in 0..n {
            // Row streaming walks j: left = same row at k-1, below = previous row at k.
            // Column streaming walks i: left = previous column at k, below = same column at k-1.
            let (zl, cl_src, zb, cb_src) = match axis {
                Axis::Row => (next[r].z_at(k - 1), next[r].c_at(k - 1), prev[r].z_at(k), prev[r].c_at(k)),
                Axis::Column => (prev[r].z_at(k), prev[r].c_at(k), next[r].z_at(k - 1), next[r].c_at(k - 1)),
            };
            zz[r * 2 * dc..r * 2 * dc + dc].copy_from_slice(zl);
            zz[r * 2 * dc + dc..(r + 1) * 2 * dc].copy_from_slice(zb);
            cl[r * dc..(r + 1) * dc].copy_from_slice(cl_src);
            cb[r * dc..(r + 1) * dc].copy_from_slice(cb_src);
        }
        let fixed_row = fixed_proj.row(k - 1);
        let (hw_rows, sw_rows): (Vec<&[T]>, Vec<&[T]>) = match axis {
            Axis::Row => (vec![fixed_row; n], own_proj.iter().map(|v| v.as_slice()).collect()),
            Axis::Column => (own_proj.iter().map(|v| v.as_slice()).collect(), vec![fixed_row; n]),
        };
        let batch = CellBatch {
            dc,
            hw_rows,
            sw_rows,
            bias: &packed.bias,
            uv: packed.uv.data(),
            zz: &zz,
            c_left: &cl,
            c_below: &cb,
        };
        kernels::cell_forward(&batch, &mut out);
        for (r, f) in next.iter_mut().enumerate() {
            let row = &out[r * 2 * dc..(r + 1) * 2 * dc];
            f.set(k, &row[..dc], &row[dc..]);
        }
    }
    Ok(next)
}

/// Row-streamed evaluation of a full grid (teacher forcing with the gold
/// target).
pub fn forward_rows<T: Scalar>(
    params: &TwoDLSTMParams,
    store: &ParamStore<T>,
    src: &EncodedSequence<T>,
    tgt: &EncodedSequence<T>,
) -> Result<GridState<T>> {
    let streamer = RowStreamer::new(params.pack(store), src)?;
    let inn = grid_extent(tgt, params.config.d_model, "target")?;
    let mut grid = GridState::zeros(streamer.src_len(), inn, params.config.d_cell);
    let mut row = streamer.initial();
    for i in 1..=inn {
        row = streamer.step(tgt.states.row(i - 1), &row)?;
        for j in 1..=streamer.src_len() {
            grid.set(j, i, row.z_at(j), row.c_at(j));
        }
    }
    Ok(grid)
}

/// Column-streamed evaluation of a full grid.
pub fn forward_columns<T: Scalar>(
    params: &TwoDLSTMParams,
    store: &ParamStore<T>,
    src: &EncodedSequence<T>,
    tgt: &EncodedSequence<T>,
) -> Result<GridState<T>> {
    let streamer = ColumnStreamer::new(params.pack(store), tgt)?;
    let jn = grid_extent(src, params.config.d_model, "source")?;
    let mut grid = GridState::zeros(jn, streamer.tgt_len(), params.config.d_cell);
    let mut col = streamer.initial();
    for j in 1..=jn {
        col = streamer.step(src.states.row(j - 1), &col)?;
        for i in 1..=streamer.tgt_len() {
            grid.set(j, i, col.z_at(i), col.c_at(i));
        }
    }
    Ok(grid)
}

/// Location of every cell of one example inside a taped batched grid.
#[derive(Clone, Debug)]
pub struct TapeGridExample {
    pub src_len: usize,
    pub tgt_len: usize,
    /// `(diagonal index, row)` for cell `(j, i)`, stored at `(j-1) * I + (i-1)`.
    pub cells: Vec<(usize, usize)>,
}

impl TapeGridExample {
    pub fn cell(&self, j: usize, i: usize) -> (usize, usize) {
        self.cells[(j - 1) * self.tgt_len + (i - 1)]
    }
}

/// A batch of grids evaluated on a tape by anti-diagonal wavefront.
#[derive(Clone, Debug)]
pub struct TapeGrid {
    /// `[z | c]` rows of each diagonal, all examples merged.
    pub diagonals: Vec<Var>,
    pub examples: Vec<TapeGridExample>,
}

/// Wavefront forward of several grids at once. `src_proj`/`tgt_proj` are the
/// stacked projected encoder states; `extents[b] = (h_offset, J, s_offset, I)`.
///
/// All examples advance together: phase `k` processes every cell with
/// `j + i = k + 2` in every example, so the phase count is
/// `max_b (J_b + I_b - 1)`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    packed: &TapePacked,
    src_proj: Var,
    tgt_proj: Var,
    extents: &[(usize, usize, usize, usize)],
) -> Result<TapeGrid> {
    let max_d = extents.iter().map(|&(_, j, _, i)| j + i).max().unwrap_or(0);
    let mut examples: Vec<TapeGridExample> = extents
        .iter()
        .map(|&(_, j, _, i)| TapeGridExample {
            src_len: j,
            tgt_len: i,
            cells: vec![(0, 0); j * i],
        })
        .collect();
    if extents.iter().any(|&(_, j, _, i)| j == 0 || i == 0) {
        return Err(Error::Precondition("grid with an empty side".into()));
    }
    let mut diagonals = Vec::new();
    // Row offset of each example's block within the previous diagonal.
    let mut prev_base = vec![0usize; extents.len()];
    let mut prev: Option<Var> = None;
    for d in 2..=max_d {
        let mut links = Vec::new();
        let mut base = vec![0usize; extents.len()];
        for (b, &(h_off, jn, s_off, inn)) in extents.iter().enumerate() {
            base[b] = links.len();
            if d > jn + inn {
                continue;
            }
            for (j, i, mut link) in diagonal_links(d, jn, inn, h_off, s_off) {
                link.left = link.left.map(|x| x + prev_base[b]);
                link.below = link.below.map(|x| x + prev_base[b]);
                examples[b].cells[(j - 1) * inn + (i - 1)] = (diagonals.len(), links.len());
                links.push(link);
            }
        }
        let state = tape.grid_diag(prev, src_proj, tgt_proj, packed.bias, packed.uv, links)?;
        diagonals.push(state);
        prev = Some(state);
        prev_base = base;
    }
    Ok(TapeGrid { diagonals, examples })
}

/// One line of the schedule benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub schedule: &'static str,
    pub src_len: usize,
    pub tgt_len: usize,
    pub d_cell: usize,
    pub phases: usize,
    pub millis: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "schedule,J,I,d_cell,phases,millis";
}

impl std::fmt::Display for BenchRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{:.3}",
            self.schedule, self.src_len, self.tgt_len, self.d_cell, self.phases, self.millis
        )
    }
}

/// Times every schedule on one random `J x I` instance.
pub fn bench<T: Scalar, R: Rng>(
    params: &TwoDLSTMParams,
    store: &ParamStore<T>,
    src_len: usize,
    tgt_len: usize,
    workers: usize,
    rng: &mut R,
) -> Result<Vec<BenchRow>> {
    let dm = params.config.d_model;
    let dc = params.config.d_cell;
    let random_seq = |rng: &mut R, n: usize| EncodedSequence {
        states: uniform(rng, n + 1, dm, 1.0),
        mask: vec![true; n + 1],
    };
    let src = random_seq(rng, src_len);
    let tgt = random_seq(rng, tgt_len);
    let row = |schedule, phases, millis| BenchRow {
        schedule,
        src_len,
        tgt_len,
        d_cell: dc,
        phases,
        millis,
    };
    let mut rows = Vec::new();
    let t = Instant::now();
    let (_, stats) = forward_naive(params, store, &src, &tgt)?;
    rows.push(row("naive", stats.phases, t.elapsed().as_secs_f64() * 1e3));
    let t = Instant::now();
    let (_, stats) = forward_diagonal(params, store, &src, &tgt, workers)?;
    rows.push(row("diagonal", stats.phases, t.elapsed().as_secs_f64() * 1e3));
    let t = Instant::now();
    forward_rows(params, store, &src, &tgt)?;
    rows.push(row("row", src_len * tgt_len, t.elapsed().as_secs_f64() * 1e3));
    let t = Instant::now();
    forward_columns(params, store, &src, &tgt)?;
    rows.push(row("column", src_len * tgt_len, t.elapsed().as_secs_f64() * 1e3));
    Ok(rows)
}
