use std::path::Path;
use std::process::{Command, Output};

fn condseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condseq")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: [&str; 20] = [
    "--corpus.hours_per_utt",
    "2000",
    "--corpus.min_train",
    "2",
    "--corpus.dev",
    "1",
    "--corpus.test",
    "2",
    "--train.epochs",
    "1",
    "--model.enc_layers",
    "1",
    "--model.enc_cells",
    "6",
    "--model.enc_proj",
    "6",
    "--model.att_dim",
    "6",
    "--model.dec_cells",
    "8",
];

fn with_tiny<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(&TINY);
    v.extend_from_slice(extra);
    v
}

#[test]
fn count_params_reports_the_encoder_delta() {
    let o = condseq(&["count-params", "--preset", "paper", "--inject", "encoder"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("delta.encoder\t196040"), "{s}");
    assert!(!s.contains("delta.decoder"));
    let all = stdout(&condseq(&["count-params"]));
    assert_eq!(all.lines().filter(|l| l.starts_with("delta.")).count(), 3);
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(condseq(&["gen-corpus"]).status.code(), Some(2));
    assert_eq!(condseq(&["count-params", "--model.bogus", "1"]).status.code(), Some(2));
    assert_eq!(condseq(&["count-params", "--seed"]).status.code(), Some(2));
    assert_eq!(condseq(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(condseq(&["run-matrix", "--setups", "S5t"]).status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 3\ncorpus.dev = 9\n").unwrap();
    let out = dir.path().join("c");
    let o = condseq(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--corpus.dev=1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echo = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(echo.contains("seed = 3"));
    assert!(echo.contains("corpus.dev = 1"));
}

#[test]
fn defaults_lists_every_key() {
    let s = stdout(&condseq(&["defaults"]));
    assert!(s.contains("train.lr = 0.1"));
    assert!(s.contains("setup.ids = S2,S5"));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_decode_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let o = condseq(&with_tiny("gen-corpus", &["--out", path(&corpus)]));
    assert!(o.status.success());
    let manifest = std::fs::read_dir(&corpus)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "tsv"))
        .unwrap();

    let run = dir.path().join("run");
    let o = condseq(&with_tiny("train", &["--manifest", path(&manifest), "--out", path(&run)]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["bpe.txt", "best.ckpt", "metrics.tsv", "config.resolved"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("best.ckpt");
    let bpe = run.join("bpe.txt");
    let common = ["--manifest", path(&manifest), "--bpe", path(&bpe), "--checkpoint", path(&ckpt)];
    let out = dir.path().join("dec");
    let mut args = common.to_vec();
    args.extend(["--decode.beam", "2", "--out", path(&out)]);
    let o = condseq(&with_tiny("decode", &args));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(out.join("hyps.tsv")).unwrap().lines().count() > 1);

    let o = condseq(&with_tiny("eval", &args));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.tsv").exists());

    let o = condseq(&with_tiny("decode", &["--manifest", path(&manifest), "--out", path(&out)]));
    assert_eq!(o.status.code(), Some(2));
}
