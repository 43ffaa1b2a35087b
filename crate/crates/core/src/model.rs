//! The two-way translation model: two causal encoders feeding one 2D-LSTM
//! grid, with a pooled softmax head for each direction.
//!
//! For a framed source `BOS f_1 .. f_n EOS` and target `BOS e_1 .. e_m EOS`
//! the grid spans `J = n + 1` by `I = m + 1` cells. Target token `e_i`
//! (with `e_{m+1} = EOS`) is predicted from the max over `j` of `z[j, i]`,
//! source token `f_j` from the max over `i` of `z[j, i]`. Both directions
//! therefore come out of one grid pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::encoder::{Dropout, EncodedSequence, EncoderConfig, EncoderParams};
use crate::nn::grid::{self, Frontier, GridConfig, PackedGrid, TwoDLSTMParams};
use crate::nn::Pooling;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Vocabulary sizes including the reserved ids.
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_cell: usize,
    /// Share one encoder between both sides (needs equal vocabularies).
    pub tie_encoders: bool,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 64,
            tgt_vocab: 64,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            layers: 2,
            d_cell: 64,
            tie_encoders: false,
            pooling: Pooling::Max,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.src_vocab <= RESERVED || self.tgt_vocab <= RESERVED {
            return Err(Error::Config(format!(
                "vocabularies must exceed the {RESERVED} reserved ids (got {} and {})",
                self.src_vocab, self.tgt_vocab
            )));
        }
        if self.d_model == 0 || self.d_cell == 0 {
            return Err(Error::Config("d_model and d_cell must be positive".into()));
        }
        if self.layers > 0 && (self.heads == 0 || self.d_model % self.heads != 0 || self.d_ff == 0) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {} and d_ff positive",
                self.d_model, self.heads
            )));
        }
        if self.tie_encoders && self.src_vocab != self.tgt_vocab {
            return Err(Error::Config("tied encoders need equal vocabulary sizes".into()));
        }
        Ok(())
    }

    fn encoder(&self, vocab: usize) -> EncoderConfig {
        EncoderConfig {
            vocab,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            layers: self.layers,
        }
    }
}

/// `BOS tokens EOS`.
pub fn frame(tokens: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(BOS);
    out.extend_from_slice(tokens);
    out.push(EOS);
    out
}

/// A batch of framed sentence pairs. `src_len[b]` is the position of the
/// source EOS, which is also the number of predicted source tokens `J`.
#[derive(Clone, Debug, PartialEq)]
pub struct BidirBatch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_len: Vec<usize>,
    pub tgt_len: Vec<usize>,
}

impl BidirBatch {
    /// Frames raw (unframed) pairs. `max_seq_len` bounds the framed length
    /// minus one.
    pub fn from_pairs<S: AsRef<[usize]>>(pairs: &[(S, S)], max_seq_len: Option<usize>) -> Result<Self> {
        let mut batch = Self {
            src: Vec::new(),
            tgt: Vec::new(),
            src_len: Vec::new(),
            tgt_len: Vec::new(),
        };
        for (s, t) in pairs {
            let (s, t) = (s.as_ref(), t.as_ref());
            for seq in [s, t] {
                if seq.iter().any(|&x| x < RESERVED) {
                    return Err(Error::Precondition("raw sentence contains a reserved id".into()));
                }
                if let Some(m) = max_seq_len {
                    if seq.len() + 1 > m {
                        return Err(Error::Precondition(format!("sentence of {} tokens exceeds max_seq_len {m}", seq.len())));
                    }
                }
            }
            batch.src.push(frame(s));
            batch.tgt.push(frame(t));
            batch.src_len.push(s.len() + 1);
            batch.tgt_len.push(t.len() + 1);
        }
        if batch.src.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Predicted tokens per direction: `(Σ I, Σ J)`.
    pub fn token_counts(&self) -> (usize, usize) {
        (self.tgt_len.iter().sum(), self.src_len.iter().sum())
    }

    /// Source ids as a rectangular matrix padded with [`PAD`].
    pub fn padded_src(&self) -> Vec<Vec<usize>> {
        pad(&self.src)
    }

    pub fn padded_tgt(&self) -> Vec<Vec<usize>> {
        pad(&self.tgt)
    }
}

fn pad(rows: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(width, PAD);
            r
        })
        .collect()
}

/// Taped loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    /// Summed NLL of both directions, or the weighted combination.
    pub total: Var,
    /// Σ −log p(e_i | ...), source-to-target.
    pub fwd_nll: Var,
    /// Σ −log p(f_j | ...), target-to-source.
    pub bwd_nll: Var,
    /// `Σ I x |V_e|` logits, examples in batch order, positions in order.
    pub fwd_logits: Var,
    /// `Σ J x |V_f|` logits.
    pub bwd_logits: Var,
    pub tgt_tokens: usize,
    pub src_tokens: usize,
}

/// Options for a training-mode forward.
pub struct ForwardOptions<'a, R: Rng> {
    pub dropout: Option<Dropout<'a, R>>,
    /// `Some(w)` gives `w·L_fwd + (1−w)·L_bwd`; `None` the plain sum.
    pub direction_weight: Option<f64>,
}

impl<R: Rng> Default for ForwardOptions<'_, R> {
    fn default() -> Self {
        Self {
            dropout: None,
            direction_weight: None,
        }
    }
}

/// A trainable parameter group for reporting (gradient checks).
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub ids: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct BidirModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub src_encoder: EncoderParams,
    pub tgt_encoder: EncoderParams,
    pub grid: TwoDLSTMParams,
    pub out_tgt: ParamId,
    pub out_tgt_bias: ParamId,
    pub out_src: ParamId,
    pub out_src_bias: ParamId,
}

fn head_init<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

impl<T: Scalar> BidirModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let src_encoder = EncoderParams::init(&mut store, "src_encoder", config.encoder(config.src_vocab), &mut rng)?;
        let tgt_encoder = if config.tie_encoders {
            src_encoder.clone()
        } else {
            EncoderParams::init(&mut store, "tgt_encoder", config.encoder(config.tgt_vocab), &mut rng)?
        };
        let grid = TwoDLSTMParams::init(
            &mut store,
            "grid",
            GridConfig {
                d_model: config.d_model,
                d_cell: config.d_cell,
            },
            &mut rng,
        );
        let dc = config.d_cell;
        let out_tgt = store.add("out_tgt.weight", head_init(&mut rng, dc, config.tgt_vocab));
        let out_tgt_bias = store.add("out_tgt.bias", Tensor::zeros(&[config.tgt_vocab]));
        let out_src = store.add("out_src.weight", head_init(&mut rng, dc, config.src_vocab));
        let out_src_bias = store.add("out_src.bias", Tensor::zeros(&[config.src_vocab]));
        Ok(Self {
            config,
            store,
            src_encoder,
            tgt_encoder,
            grid,
            out_tgt,
            out_tgt_bias,
            out_src,
            out_src_bias,
        })
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> BidirModel<U> {
        BidirModel {
            config: self.config.clone(),
            store: self.store.cast(),
            src_encoder: self.src_encoder.clone(),
            tgt_encoder: self.tgt_encoder.clone(),
            grid: self.grid.clone(),
            out_tgt: self.out_tgt,
            out_tgt_bias: self.out_tgt_bias,
            out_src: self.out_src,
            out_src_bias: self.out_src_bias,
        }
    }

    /// Encoders, the five gates and the two heads.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut groups = Vec::new();
        if self.config.tie_encoders {
            groups.push(ParamGroup {
                name: "encoder(tied)".into(),
                ids: self.src_encoder.param_ids(),
            });
        } else {
            groups.push(ParamGroup {
                name: "src_encoder".into(),
                ids: self.src_encoder.param_ids(),
            });
            groups.push(ParamGroup {
                name: "tgt_encoder".into(),
                ids: self.tgt_encoder.param_ids(),
            });
        }
        for (g, gp) in self.grid.gates.iter().enumerate() {
            groups.push(ParamGroup {
                name: format!("grid.{}", grid::GATE_NAMES[g]),
                ids: vec![gp.w, gp.u, gp.v, gp.b],
            });
        }
        groups.push(ParamGroup {
            name: "out_tgt".into(),
            ids: vec![self.out_tgt, self.out_tgt_bias],
        });
        groups.push(ParamGroup {
            name: "out_src".into(),
            ids: vec![self.out_src, self.out_src_bias],
        });
        groups
    }

    /// Builds the joint loss of `batch` on `tape` from one batched grid pass.
    pub fn joint_loss_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        batch: &BidirBatch,
        mut opts: ForwardOptions<'_, R>,
    ) -> Result<JointLoss> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        // The EOS state is never consumed by the grid.
        let src_in: Vec<&[usize]> = batch.src.iter().zip(&batch.src_len).map(|(s, &j)| &s[..j]).collect();
        let tgt_in: Vec<&[usize]> = batch.tgt.iter().zip(&batch.tgt_len).map(|(t, &i)| &t[..i]).collect();
        if batch.src_len.iter().chain(&batch.tgt_len).any(|&n| n == 0) {
            return Err(Error::Precondition("batch with a zero-length side".into()));
        }
        let (h, src_seg) = self.src_encoder.encode_batch(tape, &self.store, &src_in, opts.dropout.as_mut())?;
        let (s, tgt_seg) = self.tgt_encoder.encode_batch(tape, &self.store, &tgt_in, opts.dropout.as_mut())?;
        let packed = self.grid.pack_on_tape(tape, &self.store)?;
        let hw = tape.matmul(h, packed.w_src)?;
        let sw = tape.matmul(s, packed.w_tgt)?;
        let extents: Vec<_> = src_seg
            .iter()
            .zip(&tgt_seg)
            .map(|(&(ho, jn), &(so, inn))| (ho, jn, so, inn))
            .collect();
        let g = grid::forward_on_tape(tape, &packed, hw, sw, &extents)?;

        let mut rows = Vec::new();
        let mut tgt_targets = Vec::new();
        let mut cols = Vec::new();
        let mut src_targets = Vec::new();
        for (b, ex) in g.examples.iter().enumerate() {
            for i in 1..=ex.tgt_len {
                rows.push((1..=ex.src_len).map(|j| ex.cell(j, i)).collect());
                tgt_targets.push(batch.tgt[b][i]);
            }
            for j in 1..=ex.src_len {
                cols.push((1..=ex.tgt_len).map(|i| ex.cell(j, i)).collect());
                src_targets.push(batch.src[b][j]);
            }
        }
        let (fwd_logits, fwd_nll) = self.head_loss(tape, &g.diagonals, rows, &tgt_targets, self.out_tgt, self.out_tgt_bias)?;
        let (bwd_logits, bwd_nll) = self.head_loss(tape, &g.diagonals, cols, &src_targets, self.out_src, self.out_src_bias)?;
        let total = match opts.direction_weight {
            None => tape.add(fwd_nll, bwd_nll)?,
            Some(w) => {
                let a = tape.scale(fwd_nll, T::lit(w))?;
                let b = tape.scale(bwd_nll, T::lit(1.0 - w))?;
                tape.add(a, b)?
            }
        };
        Ok(JointLoss {
            total,
            fwd_nll,
            bwd_nll,
            fwd_logits,
            bwd_logits,
            tgt_tokens: tgt_targets.len(),
            src_tokens: src_targets.len(),
        })
    }

    fn head_loss(
        &self,
        tape: &mut Tape<T>,
        states: &[Var],
        groups: Vec<Vec<(usize, usize)>>,
        targets: &[usize],
        w: ParamId,
        b: ParamId,
    ) -> Result<(Var, Var)> {
        let pooled = tape.grid_pool(states, groups, self.config.pooling)?;
        let wv = tape.param(&self.store, w);
        let bv = tape.param(&self.store, b);
        let logits = tape.matmul(pooled, wv)?;
        let logits = tape.add(logits, bv)?;
        Ok((logits, tape.cross_entropy(logits, targets)?))
    }

    /// `(total, fwd_nll, bwd_nll)` of a batch without dropout.
    pub fn joint_loss(&self, batch: &BidirBatch) -> Result<(T, T, T)> {
        let mut tape = Tape::new();
        let l = self.joint_loss_on_tape::<ChaCha8Rng>(&mut tape, batch, ForwardOptions::default())?;
        Ok((
            tape.value(l.total).item()?,
            tape.value(l.fwd_nll).item()?,
            tape.value(l.bwd_nll).item()?,
        ))
    }

    /// Encoder states of a framed source; `J + 1` rows.
    pub fn encode_source(&self, framed: &[usize]) -> Result<EncodedSequence<T>> {
        self.src_encoder.encode(&self.store, framed)
    }

    pub fn encode_target(&self, framed: &[usize]) -> Result<EncodedSequence<T>> {
        self.tgt_encoder.encode(&self.store, framed)
    }

    pub fn packed_grid(&self) -> PackedGrid<T> {
        self.grid.pack(&self.store)
    }

    /// Log-probabilities over the target vocabulary for several grid rows.
    pub fn target_log_probs(&self, rows: &[&Frontier<T>]) -> Result<Tensor<T>> {
        self.head_log_probs(rows, self.out_tgt, self.out_tgt_bias)
    }

    /// Log-probabilities over the source vocabulary for several grid columns.
    pub fn source_log_probs(&self, cols: &[&Frontier<T>]) -> Result<Tensor<T>> {
        self.head_log_probs(cols, self.out_src, self.out_src_bias)
    }

    fn head_log_probs(&self, lines: &[&Frontier<T>], w: ParamId, b: ParamId) -> Result<Tensor<T>> {
        let dc = self.config.d_cell;
        let mut pooled = Vec::with_capacity(lines.len() * dc);
        for f in lines {
            if f.is_empty() {
                return Err(Error::Precondition("pooling over an empty row".into()));
            }
            let members: Vec<&[T]> = (1..=f.len()).map(|k| f.z_at(k)).collect();
            pooled.extend(self.config.pooling.pool(&members));
        }
        let pooled = Tensor::matrix(lines.len(), dc, pooled)?;
        let mut logits = pooled.matmul(self.store.value(w))?;
        let bias = self.store.value(b).data();
        for r in 0..logits.rows() {
            let row = logits.row_mut(r);
            for (x, &bb) in row.iter_mut().zip(bias) {
                *x = *x + bb;
            }
            log_softmax_in_place(row);
        }
        Ok(logits)
    }

    /// `p(e_i | e_<i, f)` from grid row `i`.
    pub fn predict_target_row(&self, row: &Frontier<T>) -> Result<Vec<T>> {
        Ok(self.target_log_probs(&[row])?.data().iter().map(|x| x.exp()).collect())
    }

    /// `p(f_j | f_<j, e)` from grid column `j`.
    pub fn predict_source_col(&self, col: &Frontier<T>) -> Result<Vec<T>> {
        Ok(self.source_log_probs(&[col])?.data().iter().map(|x| x.exp()).collect())
    }

    /// Per-position distributions under teacher forcing for raw (unframed)
    /// sentences: `(I x |V_e|, J x |V_f|)`.
    pub fn teacher_forced_distributions(&self, src: &[usize], tgt: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let (f, b) = self.teacher_forced_log_probs(src, tgt)?;
        Ok((f.map(|x| x.exp()), b.map(|x| x.exp())))
    }

    /// Log-space version of [`BidirModel::teacher_forced_distributions`].
    pub fn teacher_forced_log_probs(&self, src: &[usize], tgt: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let (fs, ft) = (frame(src), frame(tgt));
        let h = self.encode_source(&fs)?;
        let s = self.encode_target(&ft)?;
        let (g, _) = grid::forward_diagonal_packed(&self.packed_grid(), &h, &s, 1)?;
        let rows: Vec<Frontier<T>> = (1..=g.tgt_len).map(|i| g.row(i)).collect();
        let cols: Vec<Frontier<T>> = (1..=g.src_len).map(|j| g.column(j)).collect();
        let fwd = self.target_log_probs(&rows.iter().collect::<Vec<_>>())?;
        let bwd = self.source_log_probs(&cols.iter().collect::<Vec<_>>())?;
        Ok((fwd, bwd))
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let lse = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp()).ln();
    for x in row.iter_mut() {
        *x = *x - max - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_model: 8,
            d_ff: 12,
            heads: 2,
            layers: 1,
            d_cell: 6,
            tie_encoders: false,
            pooling: Pooling::Max,
        }
    }

    fn zero_heads(m: &mut BidirModel<f64>) {
        for id in [m.out_tgt, m.out_tgt_bias, m.out_src, m.out_src_bias] {
            m.store.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn uniform_heads_give_log_vocab_per_token() {
        let mut m = BidirModel::<f64>::new(small(8, 11), 3).unwrap();
        zero_heads(&mut m);
        let batch = BidirBatch::from_pairs(&[(vec![4, 5], vec![6, 7, 8])], None).unwrap();
        let (j, i) = (3.0, 4.0);
        let want = i * 11f64.ln() + j * 8f64.ln();
        let (total, fwd, bwd) = m.joint_loss(&batch).unwrap();
        assert!((total - want).abs() < 1e-9);
        assert!((fwd - i * 11f64.ln()).abs() < 1e-9);
        assert!((bwd - j * 8f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn two_by_two_uniform_case() {
        let mut m = BidirModel::<f64>::new(small(5, 5), 1).unwrap();
        zero_heads(&mut m);
        let batch = BidirBatch::from_pairs(&[(vec![4], vec![4])], None).unwrap();
        let (total, _, _) = m.joint_loss(&batch).unwrap();
        assert!((total - 4.0 * 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_plain_per_token_log_probs() {
        let m = BidirModel::<f64>::new(small(9, 10), 7).unwrap();
        let (src, tgt) = (vec![4, 8, 5, 6], vec![9, 7, 4]);
        let batch = BidirBatch::from_pairs(&[(src.clone(), tgt.clone())], None).unwrap();
        let (_, fwd, bwd) = m.joint_loss(&batch).unwrap();
        let (lf, lb) = m.teacher_forced_log_probs(&src, &tgt).unwrap();
        let (ft, fs) = (frame(&tgt), frame(&src));
        let want_f: f64 = (0..lf.rows()).map(|r| -lf.get2(r, ft[r + 1])).sum();
        let want_b: f64 = (0..lb.rows()).map(|r| -lb.get2(r, fs[r + 1])).sum();
        assert_eq!((lf.rows(), lb.rows()), (4, 5));
        assert!((fwd - want_f).abs() < 1e-9, "{fwd} vs {want_f}");
        assert!((bwd - want_b).abs() < 1e-9, "{bwd} vs {want_b}");
    }

    #[test]
    fn batch_loss_is_sum_of_examples() {
        let m = BidirModel::<f64>::new(small(9, 9), 2).unwrap();
        let pairs = vec![(vec![4, 5, 6], vec![7]), (vec![8], vec![4, 4, 5, 6, 7]), (vec![5, 5], vec![6, 6])];
        let (whole, _, _) = m.joint_loss(&BidirBatch::from_pairs(&pairs, None).unwrap()).unwrap();
        let parts: f64 = pairs
            .iter()
            .map(|p| m.joint_loss(&BidirBatch::from_pairs(std::slice::from_ref(p), None).unwrap()).unwrap().0)
            .sum();
        assert!((whole - parts).abs() < 1e-9);
    }

    #[test]
    fn direction_weight_interpolates() {
        let m = BidirModel::<f64>::new(small(9, 9), 4).unwrap();
        let batch = BidirBatch::from_pairs(&[(vec![4, 5], vec![6, 7, 8])], None).unwrap();
        let (_, f, b) = m.joint_loss(&batch).unwrap();
        let mut tape = Tape::new();
        let opts = ForwardOptions::<ChaCha8Rng> {
            dropout: None,
            direction_weight: Some(0.25),
        };
        let l = m.joint_loss_on_tape(&mut tape, &batch, opts).unwrap();
        let got = tape.value(l.total).item().unwrap();
        assert!((got - (0.25 * f + 0.75 * b)).abs() < 1e-12);
    }

    #[test]
    fn distributions_are_normalized() {
        let m = BidirModel::<f32>::new(small(9, 7), 5).unwrap();
        let (f, b) = m.teacher_forced_distributions(&[4, 5, 6], &[6, 5]).unwrap();
        for t in [&f, &b] {
            for r in 0..t.rows() {
                let s: f32 = t.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn future_own_tokens_do_not_change_earlier_distributions() {
        let m = BidirModel::<f64>::new(small(10, 10), 8).unwrap();
        let src = vec![4, 5, 6, 7];
        let (a, b) = (vec![4, 5, 6, 7, 8], vec![4, 5, 9, 9, 4]);
        let (fa, ba) = m.teacher_forced_log_probs(&src, &a).unwrap();
        let (fb, bb) = m.teacher_forced_log_probs(&src, &b).unwrap();
        // Rows 0..=2 predict e_1..e_3 from e_<3, which agree.
        for r in 0..3 {
            assert_eq!(fa.row(r), fb.row(r));
        }
        assert_ne!(fa.row(3), fb.row(3));
        assert_ne!(ba.data(), bb.data());
    }

    #[test]
    fn batch_framing_and_validation() {
        let b = BidirBatch::from_pairs(&[(vec![4, 5], vec![6])], None).unwrap();
        assert_eq!(b.src[0], vec![BOS, 4, 5, EOS]);
        assert_eq!((b.src_len[0], b.tgt_len[0]), (3, 2));
        assert_eq!(b.token_counts(), (2, 3));
        assert!(BidirBatch::from_pairs(&[(vec![2], vec![6])], None).is_err());
        assert!(BidirBatch::from_pairs(&[(vec![4, 4, 4], vec![6])], Some(3)).is_err());
        assert!(BidirBatch::from_pairs::<Vec<usize>>(&[], None).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(matches!(BidirModel::<f32>::new(small(4, 9), 0), Err(Error::Config(_))));
        let mut c = small(9, 9);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small(9, 8);
        c.tie_encoders = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tied_encoders_share_parameters() {
        let mut c = small(9, 9);
        c.tie_encoders = true;
        let tied = BidirModel::<f32>::new(c, 1).unwrap();
        let untied = BidirModel::<f32>::new(small(9, 9), 1).unwrap();
        assert!(tied.store.len() < untied.store.len());
        assert_eq!(tied.param_groups()[0].name, "encoder(tied)");
    }
}
