use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gridmt::config::{Precision, RunConfig};
use gridmt::data::bpe::{learn_bpe as learn, undo_bpe, BpeModel};
use gridmt::data::synthetic::{gen_synthetic, Task};
use gridmt::data::{bleu, read_lines, write_lines, ParallelCorpus, Vocabulary};
use gridmt::decode::{decode as beam_decode, BeamConfig, Direction};
use gridmt::gradcheck;
use gridmt::model::{BidirModel, ModelConfig};
use gridmt::nn::grid::{self, GridConfig, TwoDLSTMParams};
use gridmt::params::ParamStore;
use gridmt::train::checkpoint::Checkpoint;
use gridmt::train::{LogRow, PairSet, TrainConfig, Trainer};
use gridmt::{Error, Scalar};

use crate::ConfigArgs;

pub const SRC_VOCAB: &str = "src.vocab";
pub const TGT_VOCAB: &str = "tgt.vocab";
pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
    GradcheckFailed(f64),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Precondition(_) => 2,
                Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
                Error::NonFinite { .. } => 4,
                Error::DigestMismatch { .. } => 5,
                _ => 1,
            },
            CliError::Usage(_) => 2,
            CliError::GradcheckFailed(_) | CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::GradcheckFailed(w) => write!(f, "gradient check failed (worst relative error {w:.3e})"),
            CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Core(Error::Config(format!("`{key}` is not set"))))
}

fn sibling(file: &Path, name: &str) -> PathBuf {
    file.parent().unwrap_or(Path::new(".")).join(name)
}

/// Keeps the header and the rows up to `step` of an existing log.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| match l.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(s) => s <= step,
            None => true,
        })
        .collect();
    write_lines(path, &kept)?;
    Ok(())
}

pub fn train(args: &ConfigArgs, resume: Option<&Path>) -> Result<()> {
    let (cfg, ck) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut cfg = ck.run_config()?;
            cfg.apply_overrides(&args.overrides)?;
            (cfg, Some(ck))
        }
        None => (load_config(args)?, None),
    };
    let train_src = required(&cfg.train_src, "train_src")?;
    let train_tgt = required(&cfg.train_tgt, "train_tgt")?;
    let corpus = ParallelCorpus::load(train_src, train_tgt)?;
    let kept = corpus.filtered(cfg.max_seq_len - 1);
    if kept.is_empty() {
        return Err(Error::Data(format!("no usable training pairs in {}", train_src.display())).into());
    }
    println!("training pairs: {} of {}", kept.len(), corpus.len());
    let dev = match (&cfg.dev_src, &cfg.dev_tgt) {
        (Some(s), Some(t)) => Some(ParallelCorpus::load(s, t)?.filtered(cfg.max_seq_len - 1)),
        (None, None) => None,
        _ => return Err(Error::Config("set both dev_src and dev_tgt, or neither".into()).into()),
    };

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let (sv, tv) = match resume {
        Some(path) => (
            Vocabulary::load(&sibling(path, SRC_VOCAB))?,
            Vocabulary::load(&sibling(path, TGT_VOCAB))?,
        ),
        None => (Vocabulary::build(&kept.src), Vocabulary::build(&kept.tgt)),
    };
    sv.save(&cfg.out_dir.join(SRC_VOCAB))?;
    tv.save(&cfg.out_dir.join(TGT_VOCAB))?;
    let mcfg = cfg.model_config(sv.len(), tv.len());
    if let Some(ck) = &ck {
        ck.check_model(&mcfg)?;
    }
    let train_pairs = kept.to_pairs(&sv, &tv);
    let dev_pairs = dev.map(|d| d.to_pairs(&sv, &tv)).unwrap_or_default();
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, mcfg, ck.as_ref(), &train_pairs, &dev_pairs),
        Precision::F64 => train_typed::<f64>(&cfg, mcfg, ck.as_ref(), &train_pairs, &dev_pairs),
    }
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    mcfg: ModelConfig,
    ck: Option<&Checkpoint>,
    train: &PairSet,
    dev: &PairSet,
) -> Result<()> {
    let log_path = cfg.out_dir.join(LOG_FILE);
    let mut trainer = match ck {
        Some(ck) => {
            let t = Trainer::<T>::from_checkpoint(ck)?;
            truncate_log(&log_path, t.step())?;
            println!("resuming at step {}", t.step());
            t
        }
        None => {
            write_lines(&log_path, &[LogRow::CSV_HEADER])?;
            Trainer::new(BidirModel::new(mcfg, cfg.seed)?, TrainConfig::from_run(cfg))
        }
    };
    let file = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = file;
    let rows = trainer.run(train, dev, cfg.max_steps as u64, &mut log, |t, row| {
        let ck = t.to_checkpoint(cfg);
        ck.save(&cfg.out_dir.join(format!("step-{:06}.ckpt", row.step)))?;
        ck.save(&cfg.out_dir.join(LAST_CHECKPOINT))?;
        println!(
            "step {} lr {:e} train_loss {:.4} ppl_fwd {:.3} ppl_bwd {:.3}",
            row.step, row.lr, row.train_loss, row.ppl_fwd, row.ppl_bwd
        );
        Ok(())
    });
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let rows = rows?;
    println!("done: {} checkpoints in {}", rows.len(), cfg.out_dir.display());
    Ok(())
}

pub struct DecodeArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub direction: String,
    pub beam: Option<usize>,
    pub alpha: Option<f64>,
    pub max_len: Option<usize>,
    pub undo_bpe: bool,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub overrides: Vec<String>,
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let dir: Direction = a.direction.parse().map_err(CliError::Usage)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = ck.run_config()?;
    cfg.apply_overrides(&a.overrides)?;
    if let Some(b) = a.beam {
        cfg.set("beam", &b.to_string())?;
    }
    if let Some(al) = a.alpha {
        cfg.set("alpha", &al.to_string())?;
    }
    cfg.validate()?;
    let sv = Vocabulary::load(&a.src_vocab.clone().unwrap_or_else(|| sibling(&a.checkpoint, SRC_VOCAB)))?;
    let tv = Vocabulary::load(&a.tgt_vocab.clone().unwrap_or_else(|| sibling(&a.checkpoint, TGT_VOCAB)))?;
    ck.check_model(&cfg.model_config(sv.len(), tv.len()))?;
    let beam = BeamConfig {
        beam: cfg.beam,
        alpha: cfg.alpha,
        max_len: a.max_len,
        max_len_factor: cfg.max_len_factor,
        max_len_extra: cfg.max_len_extra,
    };
    let lines = read_lines(&a.input)?;
    let (inv, outv) = match dir {
        Direction::Forward => (&sv, &tv),
        Direction::Backward => (&tv, &sv),
    };
    let out = match cfg.precision {
        Precision::F32 => decode_lines(&ck.model::<f32>()?, &lines, inv, outv, dir, &beam)?,
        Precision::F64 => decode_lines(&ck.model::<f64>()?, &lines, inv, outv, dir, &beam)?,
    };
    let out: Vec<String> = if a.undo_bpe {
        out.iter()
            .map(|l| undo_bpe(&l.split_whitespace().collect::<Vec<_>>()))
            .collect()
    } else {
        out
    };
    write_lines(&a.output, &out)?;
    println!("decoded {} lines ({:?}, beam {})", out.len(), dir, cfg.beam);
    Ok(())
}

fn decode_lines<T: Scalar>(
    model: &BidirModel<T>,
    lines: &[String],
    inv: &Vocabulary,
    outv: &Vocabulary,
    dir: Direction,
    beam: &BeamConfig,
) -> Result<Vec<String>> {
    lines
        .iter()
        .map(|l| {
            let d = beam_decode(model, &inv.encode(l), dir, beam)?;
            Ok(outv.decode(&d.tokens))
        })
        .collect()
}

pub fn gradcheck(seed: u64, eps: f64, tolerance: f64, corrupt: Option<&str>) -> Result<()> {
    let (model, batch) = gradcheck::default_case(seed)?;
    let corrupt_ids = match corrupt {
        Some(name) => {
            let groups = model.param_groups();
            let g = groups
                .iter()
                .find(|g| g.name == name)
                .ok_or_else(|| CliError::Usage(format!("unknown parameter group `{name}`")))?;
            g.ids.iter().map(|id| id.index()).collect()
        }
        None => Vec::new(),
    };
    let report = gradcheck::check_model(&model, &batch, eps, tolerance, |m, b| {
        let mut grads = gradcheck::tape_gradients(m, b)?;
        for &i in &corrupt_ids {
            grads[i].data_mut().iter_mut().for_each(|x| *x *= 1.1);
        }
        Ok(grads)
    })?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(report.worst()))
    }
}

fn parse_sizes(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let s = s.trim();
            let parsed = match s.split_once('x') {
                Some((j, i)) => j.parse().ok().zip(i.parse().ok()),
                None => s.parse().ok().map(|n| (n, n)),
            };
            parsed.ok_or_else(|| CliError::Usage(format!("bad grid size `{s}` (N or JxI)")))
        })
        .collect()
}

pub fn bench(sizes: &str, d_model: usize, d_cell: usize, workers: usize, seed: u64, output: Option<&Path>) -> Result<()> {
    if d_model == 0 || d_cell == 0 || workers == 0 {
        return Err(CliError::Usage("d_model, d_cell and workers must be positive".into()));
    }
    let sizes = parse_sizes(sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let params = TwoDLSTMParams::init(&mut store, "grid", GridConfig { d_model, d_cell }, &mut rng);
    let mut lines = vec![grid::BenchRow::CSV_HEADER.to_string()];
    for (j, i) in sizes {
        for row in grid::bench(&params, &store, j, i, workers, &mut rng)? {
            let expected = match row.schedule {
                "diagonal" if j > 0 && i > 0 => j + i - 1,
                "diagonal" => 0,
                _ => j * i,
            };
            if row.phases != expected {
                return Err(CliError::Internal(format!(
                    "{} schedule on {j}x{i}: {} phases, expected {expected}",
                    row.schedule, row.phases
                )));
            }
            lines.push(row.to_string());
        }
    }
    match output {
        Some(p) => write_lines(p, &lines)?,
        None => {
            let mut out = std::io::stdout().lock();
            for l in &lines {
                writeln!(out, "{l}").map_err(|e| CliError::Internal(e.to_string()))?;
            }
        }
    }
    Ok(())
}

pub fn eval_bleu(hyp: &Path, reference: &Path, max_n: usize) -> Result<()> {
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    if h.len() != r.len() {
        return Err(Error::Data(format!("{} hypothesis lines vs {} reference lines", h.len(), r.len())).into());
    }
    let b = bleu::bleu(&h, &r, max_n).map_err(|e| match e {
        Error::Precondition(m) => Error::Data(m),
        other => other,
    })?;
    println!("BLEU = {b:.2}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn make_data(task: &str, n: usize, min_len: usize, max_len: usize, vocab: usize, seed: u64, src: &Path, tgt: &Path) -> Result<()> {
    let task: Task = task.parse().map_err(CliError::Usage)?;
    let corpus = gen_synthetic(task, n, min_len, max_len, vocab, seed).map_err(|e| match e {
        Error::Precondition(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    corpus.save(src, tgt)?;
    println!("wrote {n} pairs to {} / {}", src.display(), tgt.display());
    Ok(())
}

pub fn learn_bpe(inputs: &[PathBuf], merges: usize, output: &Path) -> Result<()> {
    let mut lines = Vec::new();
    for p in inputs {
        lines.extend(read_lines(p)?);
    }
    let model = learn(&lines, merges)?;
    model.save(output)?;
    println!("learned {} merges", model.merges.len());
    Ok(())
}

pub fn apply_bpe(model: Option<&Path>, input: &Path, output: &Path, undo: bool) -> Result<()> {
    let lines = read_lines(input)?;
    let out: Vec<String> = if undo {
        lines
            .iter()
            .map(|l| undo_bpe(&l.split_whitespace().collect::<Vec<_>>()))
            .collect()
    } else {
        let path = model.ok_or_else(|| CliError::Usage("--model is required unless --undo is given".into()))?;
        let m = BpeModel::load(path)?;
        lines.iter().map(|l| m.apply(l).join(" ")).collect()
    };
    let f = File::create(output).map_err(|e| io_err(output, e))?;
    drop(f);
    write_lines(output, &out)?;
    Ok(())
}
