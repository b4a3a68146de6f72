//! `condseq` command-line driver.
//!
//! Every command accepts `--config <file>` plus `--<dotted.key> <value>`
//! overrides; flags win over the file. Shorthands: `--seed`, `--out`,
//! `--setups`, `--preset`, `--inject`, `--manifest`, `--bpe`,
//! `--checkpoint`, `--precision`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use condseq::bpe::{train_bpe, BpeModel};
use condseq::checkpoint;
use condseq::config::RunConfig;
use condseq::corpus::{generate_corpus, read_corpus, write_corpus, Split, Utterance};
use condseq::decode::beam_search;
use condseq::harness::{aggregate, run_matrix, CellCer, CerReport, PreparedData};
use condseq::model::{count_params, param_delta, InjectionMode, LasModel};
use condseq::trainer::{finetune, make_examples, mwer_finetune, train_epochs, Example, TrainOutput};
use condseq::{Error, Precision, Scalar};

#[derive(Parser, Debug)]
#[command(name = "condseq", version, about = "Conditioned attention encoder-decoder ASR toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (requires --out).
    GenCorpus(Flags),
    /// Train a BPE model on the training split of a manifest.
    TrainBpe(Flags),
    /// Train one model.
    Train(Flags),
    /// Fine-tune a checkpoint on one dialect or (dialect, domain).
    Finetune(Flags),
    /// Beam-search the test split and write hypotheses.
    Decode(Flags),
    /// Score a checkpoint on the test split.
    Eval(Flags),
    /// Train and evaluate experiment setups.
    RunMatrix(Flags),
    /// Print parameter counts and injection deltas.
    CountParams(Flags),
    /// Print every config key with its default.
    Defaults,
}

#[derive(clap::Args, Debug)]
struct Flags {
    /// `--config <file>` and `--<key> <value>` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
    args: Vec<String>,
}

fn alias(flag: &str) -> &str {
    match flag {
        "setups" => "setup.ids",
        "preset" => "model.preset",
        "inject" => "model.inject",
        "manifest" => "corpus.manifest",
        "bpe" => "bpe.model",
        other => other,
    }
}

/// Resolves defaults, then the config file, then flags. Returns the config
/// and the keys given explicitly on the command line.
fn resolve(flags: &Flags) -> Result<(RunConfig, Vec<String>), Error> {
    let mut pairs = Vec::new();
    let mut it = flags.args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument `{a}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag `--{key}` needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        pairs.push((key, value));
    }
    let mut cfg = RunConfig::default();
    for (k, v) in &pairs {
        if k == "config" {
            cfg.load_file(Path::new(v))?;
        }
    }
    let mut given = Vec::new();
    for (k, v) in pairs.into_iter().filter(|(k, _)| k != "config") {
        let k = alias(&k).to_string();
        cfg.set(&k, &v)?;
        given.push(k);
    }
    Ok((cfg, given))
}

fn write_echo(cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved"), cfg.to_text())?;
    Ok(())
}

fn load_or_generate(cfg: &RunConfig) -> Result<(Vec<Utterance>, Vec<String>, Vec<String>), Error> {
    let profile = cfg.corpus_profile()?;
    let utts = match cfg.manifest() {
        Some(m) => read_corpus(&m)?,
        None => generate_corpus(&profile, cfg.seed()?)?,
    };
    Ok((utts, profile.dialects, profile.domains))
}

fn split(utts: &[Utterance], s: Split) -> Vec<Utterance> {
    utts.iter().filter(|u| u.split() == s).cloned().collect()
}

fn bpe_for(cfg: &RunConfig, utts: &[Utterance]) -> Result<BpeModel, Error> {
    match cfg.bpe_model() {
        Some(p) => BpeModel::load(&p),
        None => {
            let texts: Vec<String> = split(utts, Split::Train).iter().map(Utterance::text).collect();
            train_bpe(&texts, cfg.bpe_merges()?)
        }
    }
}

fn require(given: &[String], key: &str, cmd: &str) -> Result<(), Error> {
    if given.iter().any(|k| k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("{cmd} requires --{key}")))
    }
}

fn need_checkpoint(cfg: &RunConfig, cmd: &str) -> Result<PathBuf, Error> {
    cfg.checkpoint()
        .ok_or_else(|| Error::Config(format!("{cmd} requires --checkpoint")))
}

fn cmd_gen_corpus(cfg: &RunConfig, given: &[String]) -> Result<(), Error> {
    require(given, "out", "gen-corpus")?;
    let profile = cfg.corpus_profile()?;
    let utts = generate_corpus(&profile, cfg.seed()?)?;
    let out = cfg.out_dir();
    let manifest = write_corpus(&utts, &out, profile.d_feat)?;
    write_echo(cfg, &out)?;
    println!("{} utterances -> {}", utts.len(), manifest.display());
    Ok(())
}

fn cmd_train_bpe(cfg: &RunConfig) -> Result<(), Error> {
    let manifest = cfg
        .manifest()
        .ok_or_else(|| Error::Config("train-bpe requires --manifest".into()))?;
    let utts = read_corpus(&manifest)?;
    let texts: Vec<String> = split(&utts, Split::Train).iter().map(Utterance::text).collect();
    let bpe = train_bpe(&texts, cfg.bpe_merges()?)?;
    let out = cfg.out_dir();
    write_echo(cfg, &out)?;
    let path = out.join("bpe.txt");
    bpe.save(&path)?;
    println!("vocab {} ({} merges) -> {}", bpe.vocab_size(), bpe.merges().len(), path.display());
    Ok(())
}

fn cmd_train<T: Scalar>(cfg: &RunConfig) -> Result<(), Error> {
    let (utts, _, _) = load_or_generate(cfg)?;
    let bpe = bpe_for(cfg, &utts)?;
    let train: Vec<Example<T>> = make_examples(&split(&utts, Split::Train), &bpe)?;
    let dev: Vec<Example<T>> = make_examples(&split(&utts, Split::Dev), &bpe)?;
    let d_feat = utts.first().map_or(16, |u| u.d_feat);
    let h = cfg.harness(bpe.vocab_size(), d_feat)?;
    let out = cfg.out_dir();
    write_echo(cfg, &out)?;
    bpe.save(&out.join("bpe.txt"))?;
    let mut model = LasModel::<T>::new(&h.model, &mut rand_seed(h.seed))?;
    let state = train_epochs(
        &mut model,
        &train,
        &dev,
        &h.train,
        &h.optimizer,
        &bpe,
        &TrainOutput { dir: Some(out.clone()) },
    )?;
    let mut metrics = state.metrics.join("\n") + "\n";
    if h.train.epochs > 0 && h.train.mwer.epochs > 0 {
        let r = mwer_finetune(&mut model, &train, &h.train)?;
        let _ = writeln!(metrics, "mwer\ttrain\t{:.6}\t-\t{:.6e}", r.mean_loss, h.train.mwer.lr);
        checkpoint::save(&model, &out.join("final.ckpt"))?;
    }
    std::fs::write(out.join("metrics.tsv"), metrics)?;
    if !state.block_log.is_empty() {
        std::fs::write(out.join("blocks.tsv"), state.block_log.join("\n") + "\n")?;
    }
    println!("trained {} epochs, best dev loss {:.4} -> {}", state.epoch, state.best_loss, out.display());
    Ok(())
}

fn rand_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn cmd_finetune<T: Scalar>(cfg: &RunConfig) -> Result<(), Error> {
    let ckpt = need_checkpoint(cfg, "finetune")?;
    let (dialect, domain) = cfg.finetune_target()?;
    let mut model: LasModel<T> = checkpoint::load(&ckpt)?;
    let (utts, _, _) = load_or_generate(cfg)?;
    let bpe = bpe_for(cfg, &utts)?;
    let train: Vec<Example<T>> = make_examples(&split(&utts, Split::Train), &bpe)?;
    let dev: Vec<Example<T>> = make_examples(&split(&utts, Split::Dev), &bpe)?;
    let mut tcfg = cfg.train_config()?;
    tcfg.epochs = cfg.harness(bpe.vocab_size(), model.config().d_feat)?.finetune_epochs;
    let state = finetune(&mut model, &train, &dev, dialect, domain, &tcfg, &bpe)?;
    let out = cfg.out_dir();
    write_echo(cfg, &out)?;
    checkpoint::save(&model, &out.join("finetuned.ckpt"))?;
    std::fs::write(out.join("metrics.tsv"), state.metrics.join("\n") + "\n")?;
    println!("fine-tuned {} epochs -> {}", state.epoch, out.display());
    Ok(())
}

fn test_examples<T: Scalar>(cfg: &RunConfig) -> Result<(Vec<Example<T>>, BpeModel, Vec<String>, Vec<String>), Error> {
    let (utts, dialects, domains) = load_or_generate(cfg)?;
    let bpe = match cfg.bpe_model() {
        Some(p) => BpeModel::load(&p)?,
        None => return Err(Error::Config("this command requires --bpe <tokenizer file>".into())),
    };
    let test = make_examples(&split(&utts, Split::Test), &bpe)?;
    Ok((test, bpe, dialects, domains))
}

fn cmd_decode<T: Scalar>(cfg: &RunConfig) -> Result<(), Error> {
    let model: LasModel<T> = checkpoint::load(&need_checkpoint(cfg, "decode")?)?;
    let (test, bpe, _, _) = test_examples::<T>(cfg)?;
    let beam = cfg.beam_config()?;
    let mut out = String::new();
    for ex in &test {
        let hyps = beam_search(&model, &ex.feats, &ex.cond, &beam)?;
        let text = bpe.decode(hyps.first().map_or(&[][..], |h| h.content()))?;
        let _ = writeln!(out, "{}\t{}\t{}", ex.id, ex.text, text);
    }
    let dir = cfg.out_dir();
    write_echo(cfg, &dir)?;
    std::fs::write(dir.join("hyps.tsv"), out)?;
    println!("{} hypotheses -> {}", test.len(), dir.join("hyps.tsv").display());
    Ok(())
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig) -> Result<(), Error> {
    let model: LasModel<T> = checkpoint::load(&need_checkpoint(cfg, "eval")?)?;
    let (test, bpe, dialects, domains) = test_examples::<T>(cfg)?;
    let beam = cfg.beam_config()?;
    let mut cells: BTreeMap<(usize, usize), Vec<Example<T>>> = BTreeMap::new();
    for ex in test {
        cells.entry((ex.dialect, ex.domain)).or_default().push(ex);
    }
    let mut report = CerReport {
        setup: "eval".into(),
        dialects,
        domains,
        cells: Vec::new(),
    };
    for ((d, m), exs) in &cells {
        let counts = condseq::trainer::decode_cer(&model.net, &model.params, exs, &bpe, &beam)?;
        report.cells.push(CellCer {
            dialect: *d,
            domain: *m,
            counts,
        });
    }
    let dir = cfg.out_dir();
    write_echo(cfg, &dir)?;
    std::fs::write(dir.join("report.txt"), report.to_table())?;
    std::fs::write(dir.join("report.tsv"), report.to_tsv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_run_matrix<T: Scalar>(cfg: &RunConfig) -> Result<(), Error> {
    let ids = cfg.setups()?;
    let (utts, dialects, domains) = load_or_generate(cfg)?;
    let data = PreparedData::<T>::new(&utts, &dialects, &domains, cfg.bpe_merges()?)?;
    let d_feat = utts.first().map_or(16, |u| u.d_feat);
    let h = cfg.harness(data.bpe.vocab_size(), d_feat)?;
    let out = cfg.out_dir();
    write_echo(cfg, &out)?;
    data.bpe.save(&out.join("bpe.txt"))?;
    let mut warm = BTreeMap::new();
    if let Some(p) = cfg.warm_start() {
        for id in &ids {
            if let Some(base) = id.warm_start() {
                warm.insert(base, p.clone());
            }
        }
    }
    let results = run_matrix(&ids, &data, &h, &warm, Some(&out))?;
    let (mut tables, mut tsv, mut metrics) = (String::new(), String::new(), String::new());
    for r in &results {
        tables.push_str(&r.report.to_table());
        tables.push('\n');
        tsv.push_str(&r.report.to_tsv());
        for m in &r.metrics {
            let _ = writeln!(metrics, "{m}");
        }
    }
    let reports: Vec<CerReport> = results.iter().map(|r| r.report.clone()).collect();
    let comparison = aggregate(&reports)?.to_text();
    std::fs::write(out.join("reports.txt"), &tables)?;
    std::fs::write(out.join("reports.tsv"), &tsv)?;
    std::fs::write(out.join("comparison.txt"), &comparison)?;
    std::fs::write(out.join("metrics.tsv"), &metrics)?;
    print!("{tables}{comparison}");
    Ok(())
}

fn cmd_count_params(cfg: &RunConfig, given: &[String]) -> Result<(), Error> {
    let base = cfg.model_config(cfg.corpus_profile()?.vocab_size + 4, cfg.corpus_profile()?.d_feat)?;
    let none = base.clone().with_inject(InjectionMode::None);
    println!("preset\t{}", cfg.get("model.preset"));
    println!("baseline\t{}", count_params(&none));
    let modes: Vec<InjectionMode> = if given.iter().any(|k| k == "model.inject") {
        vec![base.inject]
    } else {
        vec![InjectionMode::Encoder, InjectionMode::Decoder, InjectionMode::Both]
    };
    for m in modes {
        let with = base.clone().with_inject(m);
        println!("delta.{}\t{}", m.name(), param_delta(&with, &none));
    }
    Ok(())
}

fn dispatch<F32, F64>(p: Precision, f32: F32, f64: F64) -> Result<(), Error>
where
    F32: FnOnce() -> Result<(), Error>,
    F64: FnOnce() -> Result<(), Error>,
{
    match p {
        Precision::F32 => f32(),
        Precision::F64 => f64(),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Ok(n) = std::env::var("CONDSEQ_THREADS") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("CONDSEQ_THREADS must be a positive integer, got `{n}`")))?;
        // a pool may already exist in-process; the cap is best effort then
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let resolved = |f: &Flags| resolve(f);
    match &cli.command {
        Command::Defaults => {
            print!("{}", RunConfig::documented_defaults());
            Ok(())
        }
        Command::GenCorpus(f) => {
            let (c, g) = resolved(f)?;
            cmd_gen_corpus(&c, &g)
        }
        Command::TrainBpe(f) => cmd_train_bpe(&resolved(f)?.0),
        Command::CountParams(f) => {
            let (c, g) = resolved(f)?;
            cmd_count_params(&c, &g)
        }
        Command::Train(f) => {
            let c = resolved(f)?.0;
            dispatch(c.precision()?, || cmd_train::<f32>(&c), || cmd_train::<f64>(&c))
        }
        Command::Finetune(f) => {
            let c = resolved(f)?.0;
            dispatch(c.precision()?, || cmd_finetune::<f32>(&c), || cmd_finetune::<f64>(&c))
        }
        Command::Decode(f) => {
            let c = resolved(f)?.0;
            dispatch(c.precision()?, || cmd_decode::<f32>(&c), || cmd_decode::<f64>(&c))
        }
        Command::Eval(f) => {
            let c = resolved(f)?.0;
            dispatch(c.precision()?, || cmd_eval::<f32>(&c), || cmd_eval::<f64>(&c))
        }
        Command::RunMatrix(f) => {
            let c = resolved(f)?.0;
            dispatch(c.precision()?, || cmd_run_matrix::<f32>(&c), || cmd_run_matrix::<f64>(&c))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Parse { .. } => 2,
                _ => 1,
            })
        }
    }
}
