//! Optimization: Adam, the plateau learning-rate schedule, L2 on the grid
//! weights, gradient clipping, batching and dev-set perplexity.

pub mod checkpoint;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BidirBatch, BidirModel, ForwardOptions};
use crate::nn::encoder::Dropout;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub lr: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            step: 0,
            lr,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Non-finite gradients abort the step before anything is modified.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, hyper: AdamHyper) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    if state.m.len() != ids.len() {
        return Err(Error::Precondition("optimizer state does not match the parameter store".into()));
    }
    for &id in &ids {
        if store.grad(id).shape() != state.m[id.index()].shape() {
            return Err(Error::shape("adam_step", store.grad(id).shape(), state.m[id.index()].shape()));
        }
        if !store.grad(id).all_finite() {
            return Err(Error::NonFinite { op: "adam_step gradient" });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (one, eps) = (T::one(), T::lit(hyper.eps));
    let bc1 = T::lit(1.0 - hyper.beta1.powi(t));
    let bc2 = T::lit(1.0 - hyper.beta2.powi(t));
    let lr = T::lit(state.lr);
    for id in ids {
        let i = id.index();
        let (value, grad) = store.value_and_grad_mut(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (p, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[k] = b1 * m[k] + (one - b1) * g;
            v[k] = b2 * v[k] + (one - b2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plateau schedule on the sum of both dev perplexities.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub best: Option<f64>,
    pub bad_checks: usize,
    pub patience: usize,
    pub decay: f64,
    pub decay_events: usize,
}

impl ScheduleState {
    pub fn new(patience: usize, decay: f64) -> Self {
        Self {
            best: None,
            bad_checks: 0,
            patience,
            decay,
            decay_events: 0,
        }
    }

    /// Records one dev measurement; returns `true` when the learning rate
    /// was decayed.
    pub fn maybe_decay(&mut self, criterion: f64, lr: &mut f64) -> Result<bool> {
        if !criterion.is_finite() {
            return Err(Error::NonFinite { op: "dev perplexity" });
        }
        match self.best {
            Some(b) if criterion >= b => self.bad_checks += 1,
            _ => {
                self.best = Some(criterion);
                self.bad_checks = 0;
                return Ok(false);
            }
        }
        if self.bad_checks >= self.patience {
            *lr *= self.decay;
            self.bad_checks = 0;
            self.decay_events += 1;
            return Ok(true);
        }
        Ok(false)
    }
}

/// Adds `coeff · Σ‖W‖²` over `weights` to `loss`.
pub fn apply_l2<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, loss: Var, weights: &[ParamId], coeff: f64) -> Result<Var> {
    if coeff < 0.0 {
        return Err(Error::Precondition("negative L2 coefficient".into()));
    }
    if coeff == 0.0 || weights.is_empty() {
        return Ok(loss);
    }
    let mut terms = Vec::with_capacity(weights.len());
    for &id in weights {
        let w = tape.param(store, id);
        terms.push(tape.sum_squares(w)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let penalty = tape.scale(total, T::lit(coeff))?;
    tape.add(loss, penalty)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let ids: Vec<ParamId> = store.ids().collect();
    let norm = ids
        .iter()
        .map(|&id| store.grad(id).sum_squares().to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for id in ids {
            store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}

/// A parallel corpus of raw (unframed) id sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<BidirBatch> {
        let sel: Vec<_> = idx.iter().map(|&i| (self.pairs[i].0.as_slice(), self.pairs[i].1.as_slice())).collect();
        BidirBatch::from_pairs(&sel, None)
    }

    /// Groups examples of similar `max(J, I)` into batches whose padded size
    /// `count · max(J, I)` stays within `batch_tokens`. Batch order is
    /// shuffled with `rng`.
    pub fn bucketed_batches(&self, batch_tokens: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let extent = |i: usize| self.pairs[i].0.len().max(self.pairs[i].1.len()) + 1;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.sort_by_key(|&i| extent(i));
        let mut batches = Vec::new();
        let mut cur: Vec<usize> = Vec::new();
        for i in order {
            let width = cur.iter().map(|&c| extent(c)).max().unwrap_or(0).max(extent(i));
            if !cur.is_empty() && (cur.len() + 1) * width > batch_tokens {
                batches.push(std::mem::take(&mut cur));
            }
            cur.push(i);
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
        batches.shuffle(rng);
        batches
    }
}

/// `(ppl_src_to_tgt, ppl_tgt_to_src)` over `dev`, dropout off.
pub fn evaluate_perplexity<T: Scalar>(model: &BidirModel<T>, dev: &PairSet, batch_tokens: usize) -> Result<(f64, f64)> {
    if dev.is_empty() {
        return Err(Error::Precondition("empty dev set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut fwd, mut bwd, mut nt, mut ns) = (0.0, 0.0, 0usize, 0usize);
    let mut batches = dev.bucketed_batches(batch_tokens, &mut rng);
    batches.sort();
    for idx in batches {
        let batch = dev.batch(&idx)?;
        let mut tape = Tape::new();
        let l = model.joint_loss_on_tape::<ChaCha8Rng>(&mut tape, &batch, ForwardOptions::default())?;
        fwd += tape.value(l.fwd_nll).item()?.to_f64_lossy();
        bwd += tape.value(l.bwd_nll).item()?.to_f64_lossy();
        nt += l.tgt_tokens;
        ns += l.src_tokens;
    }
    Ok(((fwd / nt as f64).exp(), (bwd / ns as f64).exp()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout: f64,
    pub l2: f64,
    /// 0 disables clipping.
    pub clip: f64,
    pub patience: usize,
    pub decay: f64,
    pub batch_tokens: usize,
    pub checkpoint_every: usize,
    pub direction_weight: Option<f64>,
    pub seed: u64,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            dropout: 0.3,
            l2: 0.05,
            clip: 5.0,
            patience: 3,
            decay: 0.9,
            batch_tokens: 1024,
            checkpoint_every: 500,
            direction_weight: None,
            seed: 1,
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_run(cfg: &crate::config::RunConfig) -> Self {
        Self {
            lr: cfg.lr,
            dropout: cfg.dropout,
            l2: cfg.l2_2dlstm,
            clip: cfg.clip,
            patience: cfg.patience,
            decay: cfg.decay,
            batch_tokens: cfg.batch_tokens,
            checkpoint_every: cfg.checkpoint_every,
            direction_weight: cfg.direction_weight,
            seed: cfg.seed,
            adam: AdamHyper::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Joint NLL per predicted token (both directions), without the penalty.
    pub loss: f64,
    pub grad_norm: f64,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub ppl_fwd: f64,
    pub ppl_bwd: f64,
    pub decay_events: usize,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,lr,train_loss,ppl_fwd,ppl_bwd,decay_events";
}

impl std::fmt::Display for LogRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{},{:e},{:.6},{:.6},{:.6},{}",
            self.step, self.lr, self.train_loss, self.ppl_fwd, self.ppl_bwd, self.decay_events
        )
    }
}

/// Owns a model and its optimizer state. Every random choice is derived from
/// `(seed, step)`, so a trainer restored from a checkpoint continues exactly
/// like the uninterrupted one.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: BidirModel<T>,
    pub opt: OptimizerState<T>,
    pub schedule: ScheduleState,
    pub cfg: TrainConfig,
    /// Running sum of per-token train losses since the last checkpoint.
    pub loss_acc: f64,
    pub loss_count: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: BidirModel<T>, cfg: TrainConfig) -> Self {
        let opt = OptimizerState::new(&model.store, cfg.lr);
        let schedule = ScheduleState::new(cfg.patience, cfg.decay);
        Self {
            model,
            opt,
            schedule,
            cfg,
            loss_acc: 0.0,
            loss_count: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    fn step_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        rng
    }

    /// Batches of epoch `epoch` (deterministic given the seed).
    pub fn epoch_batches(&self, data: &PairSet, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = self.step_rng(epoch.wrapping_mul(2).wrapping_add(1) | (1 << 63));
        data.bucketed_batches(self.cfg.batch_tokens, &mut rng)
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn train_step(&mut self, batch: &BidirBatch) -> Result<StepReport> {
        let mut drop_rng = self.step_rng(self.opt.step.wrapping_mul(2));
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            dropout: (self.cfg.dropout > 0.0).then(|| Dropout {
                rate: self.cfg.dropout,
                rng: &mut drop_rng,
            }),
            direction_weight: self.cfg.direction_weight,
        };
        let l = self.model.joint_loss_on_tape(&mut tape, batch, opts)?;
        let tokens = (l.tgt_tokens + l.src_tokens) as f64;
        let raw = tape.value(l.total).item()?.to_f64_lossy() / tokens;
        let scaled = tape.scale(l.total, T::lit(1.0 / tokens))?;
        let loss = apply_l2(&mut tape, &self.model.store, scaled, &self.model.grid.weight_ids(), self.cfg.l2)?;
        tape.backward(loss)?;
        self.model.store.zero_grad();
        tape.accumulate_param_grads(&mut self.model.store)?;
        let grad_norm = clip_global_norm(&mut self.model.store, self.cfg.clip);
        adam_step(&mut self.model.store, &mut self.opt, self.cfg.adam)?;
        self.loss_acc += raw;
        self.loss_count += 1;
        Ok(StepReport { loss: raw, grad_norm })
    }

    /// Runs until `max_steps`, evaluating and logging every
    /// `checkpoint_every` steps. `on_checkpoint` sees the trainer right after
    /// each log row (used for saving).
    pub fn run<W: Write>(
        &mut self,
        train: &PairSet,
        dev: &PairSet,
        max_steps: u64,
        log: &mut W,
        mut on_checkpoint: impl FnMut(&Trainer<T>, &LogRow) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let mut rows = Vec::new();
        let mut epoch = u64::MAX;
        let mut batches = Vec::new();
        // Every epoch has the same batch count: bucketing depends only on the
        // multiset of lengths. Batch `k` of the run is batch `k mod n` of
        // epoch `k div n`.
        let n = self.epoch_batches(train, 0).len() as u64;
        while self.opt.step < max_steps {
            let (e, pos) = (self.opt.step / n, (self.opt.step % n) as usize);
            if e != epoch {
                batches = self.epoch_batches(train, e);
                epoch = e;
            }
            let batch = train.batch(&batches[pos])?;
            self.train_step(&batch)?;
            if self.opt.step % self.cfg.checkpoint_every as u64 == 0 || self.opt.step == max_steps {
                let row = self.checkpoint_row(dev)?;
                writeln!(log, "{row}").map_err(|e| Error::Data(format!("writing log: {e}")))?;
                on_checkpoint(self, &row)?;
                rows.push(row);
            }
        }
        Ok(rows)
    }

    /// Evaluates dev perplexity, applies the schedule and resets the running
    /// train loss.
    pub fn checkpoint_row(&mut self, dev: &PairSet) -> Result<LogRow> {
        let (ppl_fwd, ppl_bwd) = if dev.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let p = evaluate_perplexity(&self.model, dev, self.cfg.batch_tokens)?;
            self.schedule.maybe_decay(p.0 + p.1, &mut self.opt.lr)?;
            p
        };
        let train_loss = if self.loss_count > 0 {
            self.loss_acc / self.loss_count as f64
        } else {
            f64::NAN
        };
        self.loss_acc = 0.0;
        self.loss_count = 0;
        Ok(LogRow {
            step: self.opt.step,
            lr: self.opt.lr,
            train_loss,
            ppl_fwd,
            ppl_bwd,
            decay_events: self.schedule.decay_events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::Pooling;

    fn scalar_store(x: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::vector(vec![x]));
        (s, id)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = OptimizerState::new(&s, 0.01);
        s.grad_mut(id).data_mut()[0] = 3.7;
        adam_step(&mut s, &mut st, AdamHyper::default()).unwrap();
        assert!((s.value(id).data()[0] - (1.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let grads = [0.5, -1.25, 2.0, 0.1, -0.3];
        let (lr, b1, b2, eps) = (0.003, 0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (0.7f64, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        let (mut s, id) = scalar_store(0.7);
        let mut st = OptimizerState::new(&s, lr);
        for g in grads {
            s.grad_mut(id).data_mut()[0] = g;
            adam_step(&mut s, &mut st, AdamHyper::default()).unwrap();
        }
        assert!((s.value(id).data()[0] - p).abs() < 1e-12);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = OptimizerState::new(&s, 0.1);
        s.grad_mut(id).data_mut()[0] = f64::NAN;
        assert!(matches!(adam_step(&mut s, &mut st, AdamHyper::default()), Err(Error::NonFinite { .. })));
        assert_eq!(s.value(id).data()[0], 1.0);
        assert_eq!(st.step, 0);
        assert_eq!(st.m[0].data()[0], 0.0);
    }

    fn run_schedule(values: &[f64], patience: usize) -> (f64, Vec<bool>) {
        let mut s = ScheduleState::new(patience, 0.9);
        let mut lr = 1.0;
        let d = values.iter().map(|&v| s.maybe_decay(v, &mut lr).unwrap()).collect();
        (lr, d)
    }

    #[test]
    fn schedule_decays_after_patience_bad_checks() {
        let (lr, d) = run_schedule(&[10.0, 11.0, 10.5, 12.0], 3);
        assert_eq!(d, vec![false, false, false, true]);
        assert_eq!(lr, 0.9);
        let (lr, d) = run_schedule(&[5.0; 4], 3);
        assert_eq!(d, vec![false, false, false, true]);
        assert_eq!(lr, 0.9);
        let (lr, _) = run_schedule(&[10.0, 11.0, 9.0, 10.0, 10.0], 3);
        assert_eq!(lr, 1.0);
        let (lr, _) = run_schedule(&[1.0; 7], 3);
        assert!((lr - 0.81).abs() < 1e-15);
        let mut s = ScheduleState::new(3, 0.9);
        assert!(s.maybe_decay(f64::INFINITY, &mut 1.0).is_err());
    }

    #[test]
    fn l2_penalty_value_and_gradient() {
        let (mut s, id) = scalar_store(2.0);
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let loss = apply_l2(&mut tape, &s, zero, &[id], 0.05).unwrap();
        assert!((tape.value(loss).item().unwrap() - 0.2).abs() < 1e-15);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut s).unwrap();
        assert!((s.grad(id).data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn global_norm_clipping() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::vector(vec![0.0]));
        let b = s.add("b", Tensor::vector(vec![0.0]));
        s.grad_mut(a).data_mut()[0] = 3.0;
        s.grad_mut(b).data_mut()[0] = 4.0;
        assert_eq!(clip_global_norm(&mut s, 1.0), 5.0);
        assert!((s.grad(a).data()[0] - 0.6).abs() < 1e-15);
        assert!((s.grad(b).data()[0] - 0.8).abs() < 1e-15);
        assert!((clip_global_norm(&mut s, 2.0) - 1.0).abs() < 1e-15);
        assert!((s.grad(b).data()[0] - 0.8).abs() < 1e-15);
    }

    fn pairs(n: usize, seed: u64) -> PairSet {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PairSet {
            pairs: (0..n)
                .map(|_| {
                    let len = rng.gen_range(1..=5);
                    let s: Vec<usize> = (0..len).map(|_| rng.gen_range(4..9)).collect();
                    (s.clone(), s)
                })
                .collect(),
        }
    }

    #[test]
    fn bucketing_covers_everything_within_budget() {
        let data = pairs(60, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = data.bucketed_batches(20, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..60).collect::<Vec<_>>());
        for b in &batches {
            let width = b.iter().map(|&i| data.pairs[i].0.len() + 1).max().unwrap();
            assert!(b.len() == 1 || b.len() * width <= 20);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(batches, data.bucketed_batches(20, &mut rng2));
    }

    fn tiny_model() -> BidirModel<f64> {
        BidirModel::new(
            ModelConfig {
                src_vocab: 9,
                tgt_vocab: 9,
                d_model: 8,
                d_ff: 16,
                heads: 2,
                layers: 1,
                d_cell: 8,
                tie_encoders: false,
                pooling: Pooling::Max,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn perplexity_is_deterministic_and_batching_invariant() {
        let m = tiny_model();
        let dev = pairs(25, 2);
        let a = evaluate_perplexity(&m, &dev, 30).unwrap();
        assert_eq!(a, evaluate_perplexity(&m, &dev, 30).unwrap());
        let b = evaluate_perplexity(&m, &dev, 7).unwrap();
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        // An untrained model is close to uniform over 9 ids.
        assert!(a.0 > 3.0 && a.1 > 3.0);
    }

    #[test]
    fn copy_task_loss_halves() {
        let data = pairs(200, 4);
        let cfg = TrainConfig {
            lr: 0.01,
            dropout: 0.0,
            l2: 0.0,
            batch_tokens: 150,
            checkpoint_every: 50,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_model(), cfg);
        let batches = t.epoch_batches(&data, 0);
        let first = t.train_step(&data.batch(&batches[0]).unwrap()).unwrap().loss;
        let rows = t.run(&data, &PairSet::default(), 200, &mut std::io::sink(), |_, _| Ok(())).unwrap();
        let last = rows.last().unwrap();
        assert_eq!(last.step, 200);
        assert!(last.train_loss < 0.5 * first, "{} vs {first}", last.train_loss);
    }

    #[test]
    fn run_logs_rows_and_decays() {
        let data = pairs(40, 6);
        let cfg = TrainConfig {
            lr: 0.0,
            dropout: 0.1,
            batch_tokens: 40,
            checkpoint_every: 2,
            patience: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_model(), cfg);
        let mut log = Vec::new();
        let mut seen = 0;
        let rows = t
            .run(&data, &data, 6, &mut log, |_, _| {
                seen += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(seen, 3);
        // lr 0 keeps perplexity fixed, so every later check is non-improving.
        assert_eq!(rows[2].decay_events, 2);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("2,"));
    }
}
