//! Beam search in both directions over one model.
//!
//! Source-to-target decoding grows the grid one row at a time
//! ([`RowStreamer`]); target-to-source grows it one column at a time
//! ([`ColumnStreamer`]). A hypothesis carries its whole current row (or
//! column) of `(z, c)` plus the key/value cache of its own-side encoder, and
//! expansion copies both from the parent.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{frame, BidirModel, BOS, EOS, PAD};
use crate::nn::encoder::{EncoderCache, EncoderParams};
use crate::nn::grid::{ColumnStreamer, Frontier, RowStreamer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Source to target (row streaming).
    Forward,
    /// Target to source (column streaming).
    Backward,
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fwd" | "forward" => Ok(Direction::Forward),
            "bwd" | "backward" => Ok(Direction::Backward),
            other => Err(format!("unknown direction `{other}` (expected fwd or bwd)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Final ranking uses `score / length^alpha`.
    pub alpha: f64,
    /// Maximum number of generated tokens, counting the final EOS. `None`
    /// gives `factor · input length + extra`.
    pub max_len: Option<usize>,
    pub max_len_factor: usize,
    pub max_len_extra: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 12,
            alpha: 0.6,
            max_len: None,
            max_len_factor: 3,
            max_len_extra: 5,
        }
    }
}

impl BeamConfig {
    pub fn with_beam(beam: usize) -> Self {
        Self {
            beam,
            ..Self::default()
        }
    }

    fn limit(&self, input_len: usize) -> usize {
        self.max_len
            .unwrap_or(self.max_len_factor * input_len + self.max_len_extra)
            .max(1)
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<T> {
    /// Emitted tokens, without BOS/EOS.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of every chosen token (EOS included once
    /// finished).
    pub score: f64,
    /// Latest grid row (forward) or column (backward).
    pub frontier: Frontier<T>,
    cache: EncoderCache<T>,
    /// Own-side encoder state of the last emitted token (BOS at first).
    last_state: Vec<T>,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub normalized: f64,
}

enum Streamer<T> {
    Rows(RowStreamer<T>),
    Columns(ColumnStreamer<T>),
}

/// The parts of a model needed to extend hypotheses in one direction.
struct Stepper<'a, T> {
    model: &'a BidirModel<T>,
    dir: Direction,
    streamer: Streamer<T>,
    own: &'a EncoderParams,
}

impl<'a, T: Scalar> Stepper<'a, T> {
    fn new(model: &'a BidirModel<T>, input: &[usize], dir: Direction) -> Result<Self> {
        let framed = frame(input);
        let packed = model.packed_grid();
        let (streamer, own) = match dir {
            Direction::Forward => (
                Streamer::Rows(RowStreamer::new(packed, &model.encode_source(&framed)?)?),
                &model.tgt_encoder,
            ),
            Direction::Backward => (
                Streamer::Columns(ColumnStreamer::new(packed, &model.encode_target(&framed)?)?),
                &model.src_encoder,
            ),
        };
        Ok(Self {
            model,
            dir,
            streamer,
            own,
        })
    }

    fn vocab(&self) -> usize {
        self.own.config.vocab
    }

    fn root(&self) -> Result<Hypothesis<T>> {
        let mut cache = self.own.start_cache();
        let last_state = self.own.step(&self.model.store, &mut cache, BOS)?;
        let frontier = match &self.streamer {
            Streamer::Rows(s) => s.initial(),
            Streamer::Columns(s) => s.initial(),
        };
        Ok(Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            frontier,
            cache,
            last_state,
            finished: false,
        })
    }

    /// Advances every hypothesis by one grid line and returns the next-token
    /// log-probabilities (`n x |V|`) plus the new lines.
    fn expand(&self, hyps: &[Hypothesis<T>]) -> Result<(Tensor<T>, Vec<Frontier<T>>)> {
        let states: Vec<&[T]> = hyps.iter().map(|h| h.last_state.as_slice()).collect();
        let prev: Vec<&Frontier<T>> = hyps.iter().map(|h| &h.frontier).collect();
        let next = match &self.streamer {
            Streamer::Rows(s) => s.step_many(&states, &prev)?,
            Streamer::Columns(s) => s.step_many(&states, &prev)?,
        };
        let refs: Vec<&Frontier<T>> = next.iter().collect();
        let lp = match self.dir {
            Direction::Forward => self.model.target_log_probs(&refs)?,
            Direction::Backward => self.model.source_log_probs(&refs)?,
        };
        Ok((lp, next))
    }

    fn child(&self, parent: &Hypothesis<T>, frontier: Frontier<T>, token: usize, logp: f64) -> Result<Hypothesis<T>> {
        let mut tokens = parent.tokens.clone();
        let score = parent.score + logp;
        if token == EOS {
            return Ok(Hypothesis {
                tokens,
                score,
                frontier,
                cache: parent.cache.clone(),
                last_state: parent.last_state.clone(),
                finished: true,
            });
        }
        tokens.push(token);
        let mut cache = parent.cache.clone();
        let last_state = self.own.step(&self.model.store, &mut cache, token)?;
        Ok(Hypothesis {
            tokens,
            score,
            frontier,
            cache,
            last_state,
            finished: false,
        })
    }
}

fn normalized(score: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        score
    } else {
        score / (len as f64).powf(alpha)
    }
}

/// Tokens a hypothesis may emit: everything but PAD and BOS, and only EOS
/// once the length limit is reached.
fn allowed(token: usize, emitted: usize, limit: usize) -> bool {
    if emitted + 1 >= limit {
        token == EOS
    } else {
        token != PAD && token != BOS
    }
}

/// Beam search for the best output given an unframed `input`.
pub fn decode<T: Scalar>(model: &BidirModel<T>, input: &[usize], dir: Direction, cfg: &BeamConfig) -> Result<Decoded> {
    Ok(decode_nbest(model, input, dir, cfg)?.remove(0))
}

/// All finished hypotheses, best first by normalized score.
pub fn decode_nbest<T: Scalar>(model: &BidirModel<T>, input: &[usize], dir: Direction, cfg: &BeamConfig) -> Result<Vec<Decoded>> {
    if cfg.beam == 0 {
        return Err(Error::Precondition("beam must be at least 1".into()));
    }
    let stepper = Stepper::new(model, input, dir)?;
    let limit = cfg.limit(input.len());
    let vocab = stepper.vocab();
    let mut live = vec![stepper.root()?];
    let mut finished: Vec<Decoded> = Vec::new();
    while !live.is_empty() && finished.len() < cfg.beam {
        let (lp, frontiers) = stepper.expand(&live)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let row = lp.row(h);
            for (tok, &l) in row.iter().enumerate().take(vocab) {
                if allowed(tok, hyp.tokens.len(), limit) {
                    cands.push((hyp.score + l.to_f64_lossy(), h, tok));
                }
            }
        }
        // Highest score first; ties by parent then token for determinism.
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for &(_, h, tok) in &cands {
            let logp = lp.row(h)[tok].to_f64_lossy();
            let child = stepper.child(&live[h], frontiers[h].clone(), tok, logp)?;
            if child.finished {
                finished.push(Decoded {
                    normalized: normalized(child.score, child.tokens.len() + 1, cfg.alpha),
                    tokens: child.tokens,
                    score: child.score,
                });
            } else {
                next.push(child);
            }
        }
        live = next;
    }
    finished.sort_by(|a, b| b.normalized.partial_cmp(&a.normalized).unwrap_or(Ordering::Equal));
    Ok(finished)
}

pub fn decode_forward<T: Scalar>(model: &BidirModel<T>, src: &[usize], cfg: &BeamConfig) -> Result<Decoded> {
    decode(model, src, Direction::Forward, cfg)
}

pub fn decode_backward<T: Scalar>(model: &BidirModel<T>, tgt: &[usize], cfg: &BeamConfig) -> Result<Decoded> {
    decode(model, tgt, Direction::Backward, cfg)
}

/// Pushes a fixed `output` through the decoding machinery. Returns the
/// per-step log-probability rows (`len + 1` rows, the last one predicting
/// EOS) and the total score of `output` followed by EOS.
pub fn forced_decode<T: Scalar>(model: &BidirModel<T>, input: &[usize], output: &[usize], dir: Direction) -> Result<(Tensor<T>, f64)> {
    let stepper = Stepper::new(model, input, dir)?;
    let mut hyp = stepper.root()?;
    let vocab = stepper.vocab();
    let mut rows = Vec::with_capacity((output.len() + 1) * vocab);
    for &tok in output.iter().chain(std::iter::once(&EOS)) {
        let (lp, mut fr) = stepper.expand(std::slice::from_ref(&hyp))?;
        if tok >= vocab {
            return Err(Error::Index {
                what: "forced token",
                index: tok,
                size: vocab,
            });
        }
        rows.extend_from_slice(lp.row(0));
        hyp = stepper.child(&hyp, fr.remove(0), tok, lp.row(0)[tok].to_f64_lossy())?;
    }
    Ok((Tensor::matrix(output.len() + 1, vocab, rows)?, hyp.score))
}

/// Log-probability of `output` given `input` (both unframed) from the
/// full-grid teacher-forced distributions.
pub fn score_sequence<T: Scalar>(model: &BidirModel<T>, src: &[usize], tgt: &[usize], dir: Direction) -> Result<f64> {
    let (fwd, bwd) = model.teacher_forced_log_probs(src, tgt)?;
    let (lp, gold) = match dir {
        Direction::Forward => (fwd, frame(tgt)),
        Direction::Backward => (bwd, frame(src)),
    };
    Ok((0..lp.rows()).map(|r| lp.row(r)[gold[r + 1]].to_f64_lossy()).sum())
}
