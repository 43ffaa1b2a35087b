//! Token embedding followed by a stack of causal (future-masked) multi-head
//! self-attention layers.
//!
//! Layers are pre-norm residual blocks: `x + Attn(LN(x))` then
//! `x + FFN(LN(x))`, with a final layer norm. Position `t` only ever attends
//! to positions `0..=t`, so the state of a prefix never changes when tokens
//! are appended. That property is what lets the decoder grow the target side
//! one token at a time with [`EncoderCache`].

use rand::Rng;

use crate::autodiff::{AttentionSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Vocabulary size including reserved ids.
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Number of attention layers; 0 feeds raw embeddings to the grid.
    pub layers: usize,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_gain: Option<ParamId>,
    pub final_bias: Option<ParamId>,
}

/// Encoder output for one sequence: row `t` is the state after reading
/// tokens `0..=t` (row 0 is BOS).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence<T> {
    pub states: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> EncodedSequence<T> {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

/// Dropout used during training.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    /// Inverted-dropout mask: zeros with probability `rate`, else `1/(1-rate)`.
    pub fn mask<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        let keep = 1.0 - self.rate;
        let scale = T::lit(1.0 / keep);
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect()
    }
}

/// Sinusoidal position encoding row for position `pos`.
pub fn positional_encoding<T: Scalar>(pos: usize, d_model: usize) -> Vec<T> {
    (0..d_model)
        .map(|k| {
            let pair = (k / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            T::lit(if k % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

fn xavier<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

impl EncoderParams {
    /// Registers freshly initialized encoder parameters under `prefix`.
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.vocab == 0 || config.d_model == 0 {
            return Err(Error::Precondition("encoder needs a vocabulary and a width".into()));
        }
        if config.layers > 0 && (config.heads == 0 || config.d_model % config.heads != 0) {
            return Err(Error::Precondition(format!(
                "d_model {} is not divisible by {} heads",
                config.d_model, config.heads
            )));
        }
        let d = config.d_model;
        let emb_scale = 1.0 / (d as f64).sqrt();
        let emb = (0..config.vocab * d)
            .map(|_| T::lit(rng.gen_range(-1.0..1.0) * emb_scale * 3f64.sqrt()))
            .collect();
        let embedding = store.add(format!("{prefix}.embedding"), Tensor::new(vec![config.vocab, d], emb)?);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(LayerParams {
                ln1_gain: store.add(format!("{p}.ln1.gain"), Tensor::full(&[d], T::one())),
                ln1_bias: store.add(format!("{p}.ln1.bias"), Tensor::zeros(&[d])),
                w_query: store.add(format!("{p}.attn.query"), xavier(rng, d, d)),
                w_key: store.add(format!("{p}.attn.key"), xavier(rng, d, d)),
                w_value: store.add(format!("{p}.attn.value"), xavier(rng, d, d)),
                w_out: store.add(format!("{p}.attn.out"), xavier(rng, d, d)),
                ln2_gain: store.add(format!("{p}.ln2.gain"), Tensor::full(&[d], T::one())),
                ln2_bias: store.add(format!("{p}.ln2.bias"), Tensor::zeros(&[d])),
                ff_in: store.add(format!("{p}.ff.in"), xavier(rng, d, config.d_ff)),
                ff_in_bias: store.add(format!("{p}.ff.in_bias"), Tensor::zeros(&[config.d_ff])),
                ff_out: store.add(format!("{p}.ff.out"), xavier(rng, config.d_ff, d)),
                ff_out_bias: store.add(format!("{p}.ff.out_bias"), Tensor::zeros(&[d])),
            });
        }
        let (final_gain, final_bias) = if config.layers > 0 {
            (
                Some(store.add(format!("{prefix}.final.gain"), Tensor::full(&[d], T::one()))),
                Some(store.add(format!("{prefix}.final.bias"), Tensor::zeros(&[d]))),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            embedding,
            layers,
            final_gain,
            final_bias,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        for l in &self.layers {
            ids.extend([
                l.ln1_gain,
                l.ln1_bias,
                l.w_query,
                l.w_key,
                l.w_value,
                l.w_out,
                l.ln2_gain,
                l.ln2_bias,
                l.ff_in,
                l.ff_in_bias,
                l.ff_out,
                l.ff_out_bias,
            ]);
        }
        ids.extend(self.final_gain);
        ids.extend(self.final_bias);
        ids
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Precondition("encoder input must contain at least BOS".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                size: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Encodes several sequences at once; returns the stacked states and the
    /// `(start, len)` row range of each sequence.
    pub fn encode_batch<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seqs: &[&[usize]],
        mut dropout: Option<&mut Dropout<'_, R>>,
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        let d = self.config.d_model;
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut pe = Vec::new();
        for s in seqs {
            self.check_tokens(s)?;
            segments.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            if !self.layers.is_empty() {
                for pos in 0..s.len() {
                    pe.extend(positional_encoding::<T>(pos, d));
                }
            }
        }
        let emb = tape.param(store, self.embedding);
        let mut x = tape.gather_rows(emb, &ids)?;
        if self.layers.is_empty() {
            return Ok((x, segments));
        }
        let pe = tape.constant(Tensor::matrix(ids.len(), d, pe)?);
        x = tape.add(x, pe)?;
        let eps = T::lit(LAYER_NORM_EPS);
        let spec = AttentionSpec {
            segments: segments.clone(),
            heads: self.config.heads,
        };
        for l in &self.layers {
            let (g1, b1) = (tape.param(store, l.ln1_gain), tape.param(store, l.ln1_bias));
            let a = tape.layer_norm(x, g1, b1, eps)?;
            let (wq, wk, wv, wo) = (
                tape.param(store, l.w_query),
                tape.param(store, l.w_key),
                tape.param(store, l.w_value),
                tape.param(store, l.w_out),
            );
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            let mask = dropout.as_mut().map(|dr| dr.mask(spec.weight_count()));
            let att = tape.causal_attention(q, k, v, spec.clone(), mask)?;
            let o = tape.matmul(att, wo)?;
            x = tape.add(x, o)?;
            let (g2, b2) = (tape.param(store, l.ln2_gain), tape.param(store, l.ln2_bias));
            let b = tape.layer_norm(x, g2, b2, eps)?;
            let (w1, bias1, w2, bias2) = (
                tape.param(store, l.ff_in),
                tape.param(store, l.ff_in_bias),
                tape.param(store, l.ff_out),
                tape.param(store, l.ff_out_bias),
            );
            let h = tape.matmul(b, w1)?;
            let h = tape.add(h, bias1)?;
            let h = tape.relu(h)?;
            let f = tape.matmul(h, w2)?;
            let mut f = tape.add(f, bias2)?;
            if let Some(dr) = dropout.as_mut() {
                let m = dr.mask(tape.value(f).len());
                let shape = tape.shape(f).to_vec();
                f = tape.mul_const(f, Tensor::new(shape, m)?)?;
            }
            x = tape.add(x, f)?;
        }
        let (gf, bf) = (
            tape.param(store, self.final_gain.expect("layers present")),
            tape.param(store, self.final_bias.expect("layers present")),
        );
        x = tape.layer_norm(x, gf, bf, eps)?;
        Ok((x, segments))
    }

    /// Encodes one BOS-prefixed sequence without dropout.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, tokens: &[usize]) -> Result<EncodedSequence<T>> {
        let mut tape = Tape::new();
        let (x, _) = self.encode_batch::<T, rand::rngs::ThreadRng>(&mut tape, store, &[tokens], None)?;
        Ok(EncodedSequence {
            states: tape.value(x).clone(),
            mask: vec![true; tokens.len()],
        })
    }

    pub fn start_cache<T: Scalar>(&self) -> EncoderCache<T> {
        EncoderCache {
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
        }
    }

    /// Appends one token to a cached prefix and returns its state row. Gives
    /// the same bits as row `t` of [`EncoderParams::encode`] on the full
    /// prefix.
    pub fn step<T: Scalar>(&self, store: &ParamStore<T>, cache: &mut EncoderCache<T>, token: usize) -> Result<Vec<T>> {
        self.check_tokens(&[token])?;
        let d = self.config.d_model;
        let pos = cache.len;
        let mut x = store.value(self.embedding).row(token).to_vec();
        if self.layers.is_empty() {
            cache.len += 1;
            return Ok(x);
        }
        for (xv, p) in x.iter_mut().zip(positional_encoding::<T>(pos, d)) {
            *xv = *xv + p;
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let heads = self.config.heads;
        let dh = d / heads;
        let mut xhat = vec![T::zero(); d];
        let mut a = vec![T::zero(); d];
        for (li, l) in self.layers.iter().enumerate() {
            kernels::layer_norm_row(
                &x,
                store.value(l.ln1_gain).data(),
                store.value(l.ln1_bias).data(),
                eps,
                &mut xhat,
                &mut a,
            );
            let q = row_matmul(&a, store.value(l.w_query));
            let k = row_matmul(&a, store.value(l.w_key));
            let v = row_matmul(&a, store.value(l.w_value));
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&v);
            let mut att = vec![T::zero(); d];
            let mut w = vec![T::zero(); pos + 1];
            for h in 0..heads {
                kernels::attention_weights_row(&q, &cache.keys[li], d, h * dh, dh, pos, &mut w);
                kernels::attention_combine_row(&w, &cache.values[li], d, h * dh, dh, pos, &mut att);
            }
            let o = row_matmul(&att, store.value(l.w_out));
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv = *xv + *ov;
            }
            kernels::layer_norm_row(
                &x,
                store.value(l.ln2_gain).data(),
                store.value(l.ln2_bias).data(),
                eps,
                &mut xhat,
                &mut a,
            );
            let mut h = row_matmul(&a, store.value(l.ff_in));
            for (hv, bv) in h.iter_mut().zip(store.value(l.ff_in_bias).data()) {
                *hv = (*hv + *bv).max(T::zero());
            }
            let f = row_matmul(&h, store.value(l.ff_out));
            for ((xv, fv), bv) in x.iter_mut().zip(&f).zip(store.value(l.ff_out_bias).data()) {
                *xv = *xv + (*fv + *bv);
            }
        }
        let mut out = vec![T::zero(); d];
        kernels::layer_norm_row(
            &x,
            store.value(self.final_gain.expect("layers present")).data(),
            store.value(self.final_bias.expect("layers present")).data(),
            eps,
            &mut xhat,
            &mut out,
        );
        cache.len += 1;
        Ok(out)
    }
}

/// Per-layer keys and values of an already encoded prefix.
#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> EncoderCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub(crate) fn row_matmul<T: Scalar>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); n];
    T::gemm(1, k, n, T::one(), x, (k as isize, 1), w.data(), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
    out
}
