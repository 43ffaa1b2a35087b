//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::Pooling;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d_model: usize,
    pub d_cell: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub tie_encoders: bool,
    pub pooling: Pooling,

    pub lr: f64,
    pub dropout: f64,
    pub l2_2dlstm: f64,
    pub patience: usize,
    pub decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip: f64,
    pub batch_tokens: usize,
    pub max_seq_len: usize,
    pub checkpoint_every: usize,
    pub max_steps: usize,
    /// `Some(w)`: `w·L_fwd + (1−w)·L_bwd`; `None`: plain sum.
    pub direction_weight: Option<f64>,

    pub beam: usize,
    pub alpha: f64,
    pub max_len_factor: usize,
    pub max_len_extra: usize,

    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub seed: u64,
    pub precision: Precision,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_cell: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            tie_encoders: false,
            pooling: Pooling::Max,
            lr: 0.0005,
            dropout: 0.3,
            l2_2dlstm: 0.05,
            patience: 3,
            decay: 0.9,
            clip: 5.0,
            batch_tokens: 1024,
            max_seq_len: 75,
            checkpoint_every: 500,
            max_steps: 10_000,
            direction_weight: None,
            beam: 12,
            alpha: 0.6,
            max_len_factor: 3,
            max_len_extra: 5,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            out_dir: PathBuf::from("run"),
            seed: 1,
            precision: Precision::F32,
            workers: 1,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d_model" => self.d_model = parse(key, v)?,
            "d_cell" => self.d_cell = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "tie_encoders" => self.tie_encoders = parse_bool(key, v)?,
            "pooling" => self.pooling = v.parse().map_err(Error::Config)?,
            "lr" => self.lr = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "l2_2dlstm" => self.l2_2dlstm = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "decay" => self.decay = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "batch_tokens" => self.batch_tokens = parse(key, v)?,
            "max_seq_len" => self.max_seq_len = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "direction_weight" => {
                self.direction_weight = match v {
                    "" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "beam" => self.beam = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "max_len_factor" => self.max_len_factor = parse(key, v)?,
            "max_len_extra" => self.max_len_extra = parse(key, v)?,
            "train_src" => self.train_src = opt_path(v),
            "train_tgt" => self.train_tgt = opt_path(v),
            "dev_src" => self.dev_src = opt_path(v),
            "dev_tgt" => self.dev_tgt = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" | "32" => Precision::F32,
                    "f64" | "64" => Precision::F64,
                    _ => return Err(Error::Config(format!("invalid precision `{v}` (f32 or f64)"))),
                }
            }
            "workers" => self.workers = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Relative paths are kept
    /// as written.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Applies `key=value` overrides (command-line `--set`).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.d_cell == 0 || self.d_ff == 0 {
            return bad("d_model, d_cell and d_ff must be positive".into());
        }
        if self.layers > 0 && (self.heads == 0 || self.d_model % self.heads != 0) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.l2_2dlstm >= 0.0 && self.clip >= 0.0) {
            return bad("l2_2dlstm and clip must be non-negative".into());
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay must be in (0, 1), got {}", self.decay));
        }
        if self.patience == 0 || self.checkpoint_every == 0 || self.batch_tokens == 0 || self.max_seq_len == 0 {
            return bad("patience, checkpoint_every, batch_tokens and max_seq_len must be positive".into());
        }
        if let Some(w) = self.direction_weight {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("direction_weight must be in [0, 1], got {w}"));
            }
        }
        if self.beam == 0 {
            return bad("beam must be at least 1".into());
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "d_cell = {}", self.d_cell);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "d_ff = {}", self.d_ff);
        let _ = writeln!(s, "tie_encoders = {}", self.tie_encoders);
        let _ = writeln!(s, "pooling = {}", self.pooling);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "dropout = {:?}", self.dropout);
        let _ = writeln!(s, "l2_2dlstm = {:?}", self.l2_2dlstm);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "decay = {:?}", self.decay);
        let _ = writeln!(s, "clip = {:?}", self.clip);
        let _ = writeln!(s, "batch_tokens = {}", self.batch_tokens);
        let _ = writeln!(s, "max_seq_len = {}", self.max_seq_len);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        match self.direction_weight {
            Some(w) => writeln!(s, "direction_weight = {w:?}"),
            None => writeln!(s, "direction_weight = none"),
        }
        .ok();
        let _ = writeln!(s, "beam = {}", self.beam);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "max_len_factor = {}", self.max_len_factor);
        let _ = writeln!(s, "max_len_extra = {}", self.max_len_extra);
        let _ = writeln!(s, "train_src = {}", p(&self.train_src));
        let _ = writeln!(s, "train_tgt = {}", p(&self.train_tgt));
        let _ = writeln!(s, "dev_src = {}", p(&self.dev_src));
        let _ = writeln!(s, "dev_tgt = {}", p(&self.dev_tgt));
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(
            s,
            "precision = {}",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
        );
        let _ = writeln!(s, "workers = {}", self.workers);
        s
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            layers: self.layers,
            d_cell: self.d_cell,
            tie_encoders: self.tie_encoders,
            pooling: self.pooling,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
        let mut c2 = cfg.clone();
        c2.apply_overrides(&["direction_weight=0.25", "train_src=a.txt", "pooling=avg", "lr=0.001"])
            .unwrap();
        assert_eq!(RunConfig::parse_str(&c2.to_text()).unwrap(), c2);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse_str("# header\n\nd_cell = 32  # narrow\nbeam=4\n").unwrap();
        assert_eq!((cfg.d_cell, cfg.beam), (32, 4));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::parse_str("colour = red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("beam = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("decay = 1.5"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("d_model = 30\nheads = 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("no equals sign"), Err(Error::Config(_))));
        assert!(RunConfig::default().apply_overrides(&["dropout=1.0"]).is_err());
    }

    #[test]
    fn hex_is_lowercase_pairs() {
        assert_eq!(hex(&[0, 171, 16]), "00ab10");
    }
}
