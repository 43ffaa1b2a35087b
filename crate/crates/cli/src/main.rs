//! `gridmt`: train, decode, verify and benchmark two-way 2D-LSTM
//! translation models.
//!
//! Exit codes: 0 success, 1 gradient check (or other internal) failure,
//! 2 configuration error, 3 data error, 4 non-finite values during
//! training, 5 checkpoint/model digest mismatch.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gridmt", version, about = "Two-way translation with a 2D-LSTM grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on both directions.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate a file with a trained checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `fwd` (source to target) or `bwd` (target to source).
        #[arg(long, default_value = "fwd")]
        direction: String,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Maximum generated tokens including the end marker.
        #[arg(long)]
        max_len: Option<usize>,
        /// Join subword output back into words.
        #[arg(long)]
        undo_bpe: bool,
        /// Defaults to `src.vocab` next to the checkpoint.
        #[arg(long)]
        src_vocab: Option<PathBuf>,
        /// Defaults to `tgt.vocab` next to the checkpoint.
        #[arg(long)]
        tgt_vocab: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every parameter group of a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = gridmt::gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = gridmt::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Test fixture: scales the analytic gradient of one group by 1.1.
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
    /// Times the grid schedules and checks their phase counts.
    Bench {
        /// Grid sizes, `N` for N x N or `JxI`, comma separated.
        #[arg(long, default_value = "1,8,16,32")]
        sizes: String,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 32)]
        d_cell: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    EvalBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_n: usize,
    },
    /// Writes a synthetic parallel corpus.
    MakeData {
        /// copy, reverse, shift[:k] or sort.
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 10)]
        max_len: usize,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
    },
    /// Learns BPE merges from one or more text files.
    LearnBpe {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 200)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Segments (or with `--undo`, joins) a text file.
    ApplyBpe {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        undo: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Decode {
            checkpoint,
            input,
            output,
            direction,
            beam,
            alpha,
            max_len,
            undo_bpe,
            src_vocab,
            tgt_vocab,
            overrides,
        } => commands::decode(commands::DecodeArgs {
            checkpoint,
            input,
            output,
            direction,
            beam,
            alpha,
            max_len,
            undo_bpe,
            src_vocab,
            tgt_vocab,
            overrides,
        }),
        Command::Gradcheck {
            seed,
            eps,
            tolerance,
            corrupt_backward,
        } => commands::gradcheck(seed, eps, tolerance, corrupt_backward.as_deref()),
        Command::Bench {
            sizes,
            d_model,
            d_cell,
            workers,
            seed,
            output,
        } => commands::bench(&sizes, d_model, d_cell, workers, seed, output.as_deref()),
        Command::EvalBleu { hyp, reference, max_n } => commands::eval_bleu(&hyp, &reference, max_n),
        Command::MakeData {
            task,
            n,
            min_len,
            max_len,
            vocab,
            seed,
            src,
            tgt,
        } => commands::make_data(&task, n, min_len, max_len, vocab, seed, &src, &tgt),
        Command::LearnBpe { input, merges, output } => commands::learn_bpe(&input, merges, &output),
        Command::ApplyBpe {
            model,
            input,
            output,
            undo,
        } => commands::apply_bpe(model.as_deref(), &input, &output, undo),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gridmt: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
