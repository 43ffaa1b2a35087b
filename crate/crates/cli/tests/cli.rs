use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridmt::data::Vocabulary;
use gridmt::decode::{decode, BeamConfig, Direction};
use gridmt::train::checkpoint::Checkpoint;

fn gridmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridmt")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_data(dir: &Path, task: &str, n: usize, vocab: usize, max_len: usize, seed: u64) -> (PathBuf, PathBuf) {
    let (src, tgt) = (dir.join(format!("{task}{seed}.src")), dir.join(format!("{task}{seed}.tgt")));
    let o = gridmt(&[
        "make-data",
        "--task",
        task,
        "--n",
        &n.to_string(),
        "--min-len",
        "1",
        "--max-len",
        &max_len.to_string(),
        "--vocab",
        &vocab.to_string(),
        "--seed",
        &seed.to_string(),
        "--src",
        p(&src),
        "--tgt",
        p(&tgt),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (src, tgt)
}

fn write_config(dir: &Path, src: &Path, tgt: &Path, out: &Path, extra: &str) -> PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# tiny model\nd_model = 16\nd_cell = 16\nd_ff = 32\nheads = 2\nlayers = 1\n\
             lr = 0.005\ndropout = 0\nl2_2dlstm = 0\nbatch_tokens = 64\n\
             train_src = {}\ntrain_tgt = {}\nout_dir = {}\n{extra}",
            p(src),
            p(tgt),
            p(out)
        ),
    )
    .unwrap();
    cfg
}

fn log_losses(out: &Path) -> Vec<(u64, f64)> {
    std::fs::read_to_string(out.join("train_log.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn copy_training_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = make_data(dir.path(), "copy", 300, 6, 5, 1);
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &src, &tgt, &out, "max_steps = 200\ncheckpoint_every = 10\n");
    let o = gridmt(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let losses = log_losses(&out);
    assert_eq!(losses.len(), 20);
    assert_eq!(losses.last().unwrap().0, 200);
    assert!(losses.last().unwrap().1 < 0.5 * losses[0].1, "{losses:?}");
    for f in ["src.vocab", "tgt.vocab", "last.ckpt", "step-000200.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn resume_continues_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = make_data(dir.path(), "reverse", 120, 6, 4, 2);
    let full = dir.path().join("full");
    let cfg = write_config(dir.path(), &src, &tgt, &full, "max_steps = 30\ncheckpoint_every = 10\ndropout = 0.1\n");
    assert_eq!(code(&gridmt(&["train", "--config", p(&cfg)])), 0);

    let part = dir.path().join("part");
    let o = gridmt(&["train", "--config", p(&cfg), "--set", &format!("out_dir={}", p(&part)), "--set", "max_steps=20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gridmt(&["train", "--resume", p(&part.join("step-000020.ckpt")), "--set", "max_steps=30"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("resuming at step 20"));

    let a = Checkpoint::load(&full.join("step-000030.ckpt")).unwrap();
    let b = Checkpoint::load(&part.join("step-000030.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.state, b.state);
    let (la, lb) = (log_losses(&full), log_losses(&part));
    assert_eq!(lb.iter().map(|r| r.0).collect::<Vec<_>>(), vec![10, 20, 30]);
    assert_eq!(la, lb);
}

#[test]
fn missing_data_file_exits_3_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.src");
    let cfg = write_config(dir.path(), &missing, &missing, &dir.path().join("o"), "");
    let o = gridmt(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope.src"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "d_model = 16\nwidth = 3\n").unwrap();
    let o = gridmt(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("width"));
    assert_eq!(code(&gridmt(&["train", "--set", "lr=-1"])), 2);
    assert_eq!(code(&gridmt(&["train"])), 2);
}

#[test]
fn decode_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = make_data(dir.path(), "copy", 60, 5, 3, 3);
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &src, &tgt, &out, "max_steps = 20\ncheckpoint_every = 20\n");
    assert_eq!(code(&gridmt(&["train", "--config", p(&cfg)])), 0);
    let ck = out.join("last.ckpt");

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let res = dir.path().join("empty.out");
    let o = gridmt(&["decode", "--checkpoint", p(&ck), "--input", p(&empty), "--output", p(&res)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&res).unwrap(), "");

    let input = dir.path().join("in.txt");
    std::fs::write(&input, "a b c\nd\n").unwrap();
    let res = dir.path().join("beam1.out");
    for dir_flag in ["fwd", "bwd"] {
        let o = gridmt(&[
            "decode", "--checkpoint", p(&ck), "--input", p(&input), "--output", p(&res), "--direction", dir_flag, "--beam", "1",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let got = std::fs::read_to_string(&res).unwrap();
        assert_eq!(got.lines().count(), 2);

        let c = Checkpoint::load(&ck).unwrap();
        let model = c.model::<f32>().unwrap();
        let sv = Vocabulary::load(&out.join("src.vocab")).unwrap();
        let tv = Vocabulary::load(&out.join("tgt.vocab")).unwrap();
        let (d, inv, outv) = if dir_flag == "fwd" {
            (Direction::Forward, &sv, &tv)
        } else {
            (Direction::Backward, &tv, &sv)
        };
        let cfg = c.run_config().unwrap();
        let beam = BeamConfig {
            beam: 1,
            alpha: cfg.alpha,
            max_len: None,
            max_len_factor: cfg.max_len_factor,
            max_len_extra: cfg.max_len_extra,
        };
        let want: Vec<String> = ["a b c", "d"]
            .iter()
            .map(|l| outv.decode(&decode(&model, &inv.encode(l), d, &beam).unwrap().tokens))
            .collect();
        assert_eq!(got.lines().collect::<Vec<_>>(), want);
    }

    let o = gridmt(&["decode", "--checkpoint", p(&ck), "--input", p(&input), "--output", p(&res), "--set", "d_cell=8"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let o = gridmt(&["decode", "--checkpoint", p(&ck), "--input", p(&input), "--output", p(&res), "--direction", "up"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn round_trip_on_a_bijective_task() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = make_data(dir.path(), "shift:1", 2000, 6, 4, 4);
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        &src,
        &tgt,
        &out,
        "max_steps = 1500\ncheckpoint_every = 500\nbatch_tokens = 128\nbeam = 2\n",
    );
    let o = gridmt(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (held_src, _) = make_data(dir.path(), "shift:1", 50, 6, 4, 99);
    let ck = out.join("last.ckpt");
    let fwd = dir.path().join("fwd.out");
    let back = dir.path().join("back.out");
    let o = gridmt(&["decode", "--checkpoint", p(&ck), "--input", p(&held_src), "--output", p(&fwd)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gridmt(&["decode", "--checkpoint", p(&ck), "--input", p(&fwd), "--output", p(&back), "--direction", "bwd"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = std::fs::read_to_string(&held_src).unwrap();
    let b = std::fs::read_to_string(&back).unwrap();
    let same = a.lines().zip(b.lines()).filter(|(x, y)| x == y).count();
    assert!(same * 10 >= 9 * 50, "{same}/50 round trips");
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = gridmt(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    for g in [
        "src_encoder", "tgt_encoder", "grid.input", "grid.forget", "grid.lambda", "grid.output", "grid.candidate", "out_tgt",
        "out_src",
    ] {
        assert!(text.contains(g), "{g} missing from report");
    }
    let o = gridmt(&["gradcheck", "--corrupt-backward", "grid.forget"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn bench_reports_phase_counts() {
    let o = gridmt(&["bench", "--sizes", "1,32", "--d-model", "8", "--d-cell", "8", "--workers", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "schedule,J,I,d_cell,phases,millis");
    assert!(lines.iter().any(|l| l.starts_with("naive,1,1,8,1,")));
    assert!(lines.iter().any(|l| l.starts_with("diagonal,1,1,8,1,")));
    assert!(lines.iter().any(|l| l.starts_with("naive,32,32,8,1024,")));
    assert!(lines.iter().any(|l| l.starts_with("diagonal,32,32,8,63,")));
    assert_eq!(code(&gridmt(&["bench", "--sizes", "3y4"])), 2);
}

#[test]
fn bleu_and_bpe_commands() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("text.txt");
    std::fs::write(&text, "the cat sat on the mat\nthe dog sat on the log\n").unwrap();
    let o = gridmt(&["eval-bleu", "--hyp", p(&text), "--ref", p(&text)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "BLEU = 100.00");

    let model = dir.path().join("bpe.model");
    let o = gridmt(&["learn-bpe", "--input", p(&text), "--merges", "10", "--output", p(&model)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(std::fs::read_to_string(&model).unwrap().starts_with("#version 1\n"));
    let seg = dir.path().join("seg.txt");
    let back = dir.path().join("back.txt");
    assert_eq!(code(&gridmt(&["apply-bpe", "--model", p(&model), "--input", p(&text), "--output", p(&seg)])), 0);
    assert!(std::fs::read_to_string(&seg).unwrap().contains("</w>"));
    assert_eq!(code(&gridmt(&["apply-bpe", "--undo", "--input", p(&seg), "--output", p(&back)])), 0);
    assert_eq!(std::fs::read_to_string(&back).unwrap(), std::fs::read_to_string(&text).unwrap());

    let missing = dir.path().join("missing.txt");
    assert_eq!(code(&gridmt(&["eval-bleu", "--hyp", p(&missing), "--ref", p(&text)])), 3);
}

#[test]
fn make_data_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = make_data(dir.path(), "reverse", 5, 20, 6, 7);
    let s = std::fs::read_to_string(src).unwrap();
    let t = std::fs::read_to_string(tgt).unwrap();
    for (a, b) in s.lines().zip(t.lines()) {
        let rev: Vec<&str> = a.split(' ').rev().collect();
        assert_eq!(rev.join(" "), b);
    }
    let o = gridmt(&["make-data", "--task", "rot13", "--n", "1", "--src", "x", "--tgt", "y"]);
    assert_eq!(code(&o), 2);
}
