//! Trains one model on the reverse task and reports exact-match accuracy in
//! both directions.
//!
//! `cargo run --release -p gridmt --example reverse_task -- [key=value ...]`
//! with keys d_model, d_cell, d_ff, layers, heads, lr, dropout, l2,
//! batch_tokens, steps, eval_every, checkpoint_every, patience, decay,
//! n_train, n_test, beam, seed.

use std::collections::HashMap;
use std::time::Instant;

use gridmt::data::synthetic::{gen_synthetic, Task};
use gridmt::data::Vocabulary;
use gridmt::decode::{decode, BeamConfig, Direction};
use gridmt::model::{BidirModel, ModelConfig};
use gridmt::nn::Pooling;
use gridmt::train::{TrainConfig, Trainer};

fn main() -> gridmt::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map(|v| v.parse::<f64>().unwrap()).unwrap_or(d);
    let n_train = get("n_train", 10000.0) as usize;
    let n_test = get("n_test", 500.0) as usize;
    let steps = get("steps", 2000.0) as u64;
    let eval_every = get("eval_every", 500.0) as u64;
    let seed = get("seed", 1.0) as u64;

    let train = gen_synthetic(Task::Reverse, n_train, 3, 10, 20, seed)?;
    let test = gen_synthetic(Task::Reverse, n_test, 3, 10, 20, seed + 1000)?;
    let dev = gen_synthetic(Task::Reverse, 300, 3, 10, 20, seed + 2000)?;
    let vocab = Vocabulary::build(&train.src);
    let train_pairs = train.to_pairs(&vocab, &vocab);
    let test_pairs = test.to_pairs(&vocab, &vocab);
    let dev_pairs = dev.to_pairs(&vocab, &vocab);

    let mcfg = ModelConfig {
        src_vocab: vocab.len(),
        tgt_vocab: vocab.len(),
        d_model: get("d_model", 32.0) as usize,
        d_ff: get("d_ff", 64.0) as usize,
        heads: get("heads", 2.0) as usize,
        layers: get("layers", 1.0) as usize,
        d_cell: get("d_cell", 32.0) as usize,
        tie_encoders: false,
        pooling: Pooling::Max,
    };
    let tcfg = TrainConfig {
        lr: get("lr", 0.002),
        dropout: get("dropout", 0.0),
        l2: get("l2", 0.0),
        batch_tokens: get("batch_tokens", 256.0) as usize,
        checkpoint_every: get("checkpoint_every", 1000.0) as usize,
        patience: get("patience", 3.0) as usize,
        decay: get("decay", 0.9),
        seed,
        ..TrainConfig::default()
    };
    let beam = BeamConfig::with_beam(get("beam", 4.0) as usize);
    let mut trainer = Trainer::new(BidirModel::<f32>::new(mcfg, seed)?, tcfg);
    let start = Instant::now();
    let mut done = 0;
    while done < steps {
        done = (done + eval_every).min(steps);
        trainer.run(&train_pairs, &dev_pairs, done, &mut std::io::stdout(), |_, _| Ok(()))?;
        let (mut fwd, mut bwd) = (0, 0);
        let n_eval = n_test.min(100);
        for (s, t) in test_pairs.pairs.iter().take(n_eval) {
            fwd += (decode(&trainer.model, s, Direction::Forward, &beam)?.tokens == *t) as usize;
            bwd += (decode(&trainer.model, t, Direction::Backward, &beam)?.tokens == *s) as usize;
        }
        println!(
            "step {done} elapsed {:.0}s lr {:.2e} exact fwd {}/{n_eval} bwd {}/{n_eval}",
            start.elapsed().as_secs_f64(),
            trainer.opt.lr,
            fwd,
            bwd
        );
    }
    Ok(())
}
