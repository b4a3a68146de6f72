//! Experiment matrix: independent, pooled, feature-injected and fine-tuned
//! setups, each evaluated per (dialect, domain) test cell.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bpe::{train_bpe, BpeModel};
use crate::checkpoint;
use crate::corpus::{Split, Utterance};
use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::eval::ErrorCount;
use crate::model::{InjectionMode, LasModel, ModelConfig};
use crate::scalar::Scalar;
use crate::trainer::{
    decode_cer, example_seed, finetune, make_examples, mwer_finetune, train_epochs, Example, Optimizer,
    TrainConfig, TrainOutput,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetupId {
    S0,
    S1,
    S2,
    S3,
    S4,
    S5,
    S2d,
    S2t,
    S5d,
    S5t,
}

impl SetupId {
    pub const ALL: [SetupId; 10] = [
        SetupId::S0,
        SetupId::S1,
        SetupId::S2,
        SetupId::S3,
        SetupId::S4,
        SetupId::S5,
        SetupId::S2d,
        SetupId::S2t,
        SetupId::S5d,
        SetupId::S5t,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SetupId::S0 => "S0",
            SetupId::S1 => "S1",
            SetupId::S2 => "S2",
            SetupId::S3 => "S3",
            SetupId::S4 => "S4",
            SetupId::S5 => "S5",
            SetupId::S2d => "S2d",
            SetupId::S2t => "S2t",
            SetupId::S5d => "S5d",
            SetupId::S5t => "S5t",
        }
    }

    pub fn inject(self) -> InjectionMode {
        match self {
            SetupId::S3 => InjectionMode::Encoder,
            SetupId::S4 => InjectionMode::Decoder,
            SetupId::S5 | SetupId::S5d | SetupId::S5t => InjectionMode::Both,
            _ => InjectionMode::None,
        }
    }

    /// The joint setup a fine-tuned variant starts from.
    pub fn warm_start(self) -> Option<SetupId> {
        match self {
            SetupId::S2d | SetupId::S2t => Some(SetupId::S2),
            SetupId::S5d | SetupId::S5t => Some(SetupId::S5),
            _ => None,
        }
    }

    pub fn valid_ids() -> String {
        SetupId::ALL.map(SetupId::name).join(", ")
    }
}

impl fmt::Display for SetupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SetupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SetupId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown setup `{s}`; valid setups: {}", SetupId::valid_ids())))
    }
}

pub fn parse_setups(s: &str) -> Result<Vec<SetupId>> {
    let ids = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<SetupId>>>()?;
    if ids.is_empty() {
        return Err(Error::Config(format!("no setups given; valid setups: {}", SetupId::valid_ids())));
    }
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSetup {
    pub id: SetupId,
    pub inject: InjectionMode,
    /// Checkpoint of the joint model a fine-tuned variant starts from.
    pub warm_start: Option<PathBuf>,
}

impl ExperimentSetup {
    pub fn new(id: SetupId) -> Self {
        ExperimentSetup {
            id,
            inject: id.inject(),
            warm_start: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    /// Base model; the injection mode is set per setup.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fine-tuning epochs for the `d`/`t` variants.
    pub finetune_epochs: usize,
    pub optimizer: Optimizer,
    pub beam: BeamConfig,
    pub bpe_merges: usize,
    pub seed: u64,
}

/// Corpus split into train/dev/test examples with a shared tokenizer.
#[derive(Clone, Debug)]
pub struct PreparedData<T> {
    pub bpe: BpeModel,
    pub train: Vec<Example<T>>,
    pub dev: Vec<Example<T>>,
    pub test: Vec<Example<T>>,
    pub dialects: Vec<String>,
    pub domains: Vec<String>,
}

impl<T: Scalar> PreparedData<T> {
    pub fn new(utts: &[Utterance], dialects: &[String], domains: &[String], bpe_merges: usize) -> Result<Self> {
        let by = |s: Split| utts.iter().filter(|u| u.split() == s).cloned().collect::<Vec<_>>();
        let (tr, dv, te) = (by(Split::Train), by(Split::Dev), by(Split::Test));
        if tr.is_empty() || dv.is_empty() || te.is_empty() {
            return Err(Error::Input("corpus needs non-empty train, dev and test splits".into()));
        }
        let texts: Vec<String> = tr.iter().map(Utterance::text).collect();
        let bpe = train_bpe(&texts, bpe_merges)?;
        Ok(PreparedData {
            train: make_examples(&tr, &bpe)?,
            dev: make_examples(&dv, &bpe)?,
            test: make_examples(&te, &bpe)?,
            bpe,
            dialects: dialects.to_vec(),
            domains: domains.to_vec(),
        })
    }

    fn cells(&self) -> BTreeSet<(usize, usize)> {
        self.test.iter().map(|e| (e.dialect, e.domain)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellCer {
    pub dialect: usize,
    pub domain: usize,
    pub counts: ErrorCount,
}

impl CellCer {
    pub fn cer(&self) -> f64 {
        self.counts.rate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CerReport {
    pub setup: String,
    pub dialects: Vec<String>,
    pub domains: Vec<String>,
    /// Sorted by (dialect, domain).
    pub cells: Vec<CellCer>,
}

impl CerReport {
    pub fn cell(&self, dialect: usize, domain: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.dialect == dialect && c.domain == domain)
            .map(CellCer::cer)
    }

    /// Unweighted mean over the dialect's cells.
    pub fn dialect_mean(&self, dialect: usize) -> Option<f64> {
        mean(self.cells.iter().filter(|c| c.dialect == dialect).map(CellCer::cer))
    }

    /// Unweighted mean over all cells.
    pub fn overall_mean(&self) -> Option<f64> {
        mean(self.cells.iter().map(CellCer::cer))
    }

    pub fn present_dialects(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.dialect).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn name_of(names: &[String], i: usize) -> String {
        names.get(i).cloned().unwrap_or_else(|| i.to_string())
    }

    /// Dialect rows by domain columns, CER in percent, plus the row mean.
    pub fn to_table(&self) -> String {
        let domains: Vec<usize> = self.cells.iter().map(|c| c.domain).collect::<BTreeSet<_>>().into_iter().collect();
        let mut header = vec![self.setup.clone()];
        header.extend(domains.iter().map(|&m| Self::name_of(&self.domains, m)));
        header.push("mean".into());
        let mut rows = vec![header];
        for d in self.present_dialects() {
            let mut row = vec![Self::name_of(&self.dialects, d)];
            for &m in &domains {
                row.push(self.cell(d, m).map_or("-".into(), |c| format!("{:.2}", 100.0 * c)));
            }
            row.push(self.dialect_mean(d).map_or("-".into(), |c| format!("{:.2}", 100.0 * c)));
            rows.push(row);
        }
        align(&rows)
    }

    /// `setup \t dialect \t domain \t cer` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}",
                self.setup,
                Self::name_of(&self.dialects, c.dialect),
                Self::name_of(&self.domains, c.domain),
                c.cer()
            );
        }
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
    }
    s
}

/// `(A − B) / A`.
pub fn cerr(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        (a - b) / a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub setups: Vec<String>,
    pub dialects: Vec<String>,
    /// `means[s][d]`: setup `s`, dialect column `d` (last column is the overall mean).
    pub means: Vec<Vec<f64>>,
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let mut rows = vec![{
            let mut h = vec!["setup".to_string()];
            h.extend(self.dialects.iter().cloned());
            h.push("mean".into());
            h
        }];
        for (s, m) in self.setups.iter().zip(&self.means) {
            let mut r = vec![s.clone()];
            r.extend(m.iter().map(|v| format!("{:.2}", 100.0 * v)));
            rows.push(r);
        }
        let mut out = align(&rows);
        out.push('\n');
        let mut rows = vec![vec!["CERR %".to_string(), "mean".to_string()]];
        for (i, a) in self.setups.iter().enumerate() {
            for (j, b) in self.setups.iter().enumerate() {
                if i != j {
                    let ma = *self.means[i].last().expect("mean column");
                    let mb = *self.means[j].last().expect("mean column");
                    rows.push(vec![format!("{a}->{b}"), format!("{:.2}", 100.0 * cerr(ma, mb))]);
                }
            }
        }
        out.push_str(&align(&rows));
        out
    }
}

/// Per-setup per-dialect unweighted means and the overall mean.
pub fn aggregate(reports: &[CerReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Input("nothing to aggregate".into()))?;
    let key = |r: &CerReport| r.cells.iter().map(|c| (c.dialect, c.domain, c.counts.ref_len)).collect::<Vec<_>>();
    let k0 = key(first);
    if reports.iter().any(|r| key(r) != k0) {
        return Err(Error::Contract("reports were computed on different test sets".into()));
    }
    let dialect_ids = first.present_dialects();
    let means = reports
        .iter()
        .map(|r| {
            let mut m: Vec<f64> = dialect_ids.iter().map(|&d| r.dialect_mean(d).unwrap_or(0.0)).collect();
            m.push(r.overall_mean().unwrap_or(0.0));
            m
        })
        .collect();
    Ok(Comparison {
        setups: reports.iter().map(|r| r.setup.clone()).collect(),
        dialects: dialect_ids.iter().map(|&d| CerReport::name_of(&first.dialects, d)).collect(),
        means,
    })
}

/// Result of one setup: its report and the models it produced.
pub struct SetupResult<T> {
    pub report: CerReport,
    pub models: Vec<LasModel<T>>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<String>,
}

fn evaluate_cells<T: Scalar>(
    model: &LasModel<T>,
    data: &PreparedData<T>,
    cells: &[(usize, usize)],
    beam: &BeamConfig,
) -> Result<Vec<CellCer>> {
    cells
        .iter()
        .map(|&(d, m)| {
            let ex: Vec<Example<T>> = data
                .test
                .iter()
                .filter(|e| e.dialect == d && e.domain == m)
                .cloned()
                .collect();
            Ok(CellCer {
                dialect: d,
                domain: m,
                counts: decode_cer(&model.net, &model.params, &ex, &data.bpe, beam)?,
            })
        })
        .collect()
}

fn subset<T: Clone>(xs: &[Example<T>], keep: impl Fn(&Example<T>) -> bool) -> Vec<Example<T>> {
    xs.iter().filter(|e| keep(e)).cloned().collect()
}

/// Trains (or fine-tunes) and evaluates one setup. `warm` supplies the joint
/// model for fine-tuned variants.
pub fn run_setup<T: Scalar>(
    setup: &ExperimentSetup,
    data: &PreparedData<T>,
    cfg: &HarnessConfig,
    warm: Option<&LasModel<T>>,
    out_dir: Option<&Path>,
) -> Result<SetupResult<T>> {
    let all_cells: Vec<(usize, usize)> = data.cells().into_iter().collect();
    let dialects: Vec<usize> = all_cells.iter().map(|c| c.0).collect::<BTreeSet<_>>().into_iter().collect();
    let setup_index = SetupId::ALL.iter().position(|&s| s == setup.id).expect("known setup") as u64;
    let mut model_cfg = cfg.model.clone();
    model_cfg.inject = setup.inject;
    model_cfg.vocab_size = data.bpe.vocab_size();
    let mut groups: Vec<(Option<usize>, Option<usize>)> = match setup.id {
        SetupId::S0 | SetupId::S2d | SetupId::S5d => dialects.iter().map(|&d| (Some(d), None)).collect(),
        SetupId::S1 | SetupId::S2t | SetupId::S5t => all_cells.iter().map(|&(d, m)| (Some(d), Some(m))).collect(),
        _ => vec![(None, None)],
    };
    groups.dedup();
    let warm = match (setup.id.warm_start(), warm, &setup.warm_start) {
        (None, _, _) => None,
        (Some(_), Some(m), _) => Some(m.clone()),
        (Some(_), None, Some(path)) => Some(checkpoint::load::<T>(path)?),
        (Some(base), None, None) => {
            return Err(Error::Config(format!(
                "{} needs a warm-start checkpoint from {base}",
                setup.id
            )))
        }
    };
    if let Some(w) = &warm {
        if w.config().inject != setup.inject {
            return Err(Error::Config(format!(
                "warm-start model uses injection `{}` but {} needs `{}`",
                w.config().inject.name(),
                setup.id,
                setup.inject.name()
            )));
        }
    }
    let mut result = SetupResult {
        report: CerReport {
            setup: setup.id.name().to_string(),
            dialects: data.dialects.clone(),
            domains: data.domains.clone(),
            cells: Vec::new(),
        },
        models: Vec::new(),
        checkpoints: Vec::new(),
        metrics: Vec::new(),
    };
    for (gi, &(fd, fm)) in groups.iter().enumerate() {
        let keep = |e: &Example<T>| fd.is_none_or(|d| e.dialect == d) && fm.is_none_or(|m| e.domain == m);
        let seed = example_seed(cfg.seed, setup_index as usize, gi);
        let mut tcfg = cfg.train.clone();
        tcfg.seed = seed;
        let model = match &warm {
            Some(w) => {
                let mut m = w.clone();
                tcfg.epochs = cfg.finetune_epochs;
                let st = finetune(&mut m, &data.train, &data.dev, fd.expect("fine-tune groups are filtered"), fm, &tcfg, &data.bpe)?;
                result.metrics.extend(tag_lines(setup.id, gi, &st.metrics));
                m
            }
            None => {
                let train = subset(&data.train, keep);
                let dev = subset(&data.dev, keep);
                let mut m = LasModel::<T>::new(&model_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
                let st = train_epochs(&mut m, &train, &dev, &tcfg, &cfg.optimizer, &data.bpe, &TrainOutput::default())?;
                result.metrics.extend(tag_lines(setup.id, gi, &st.metrics));
                if tcfg.mwer.epochs > 0 {
                    let r = mwer_finetune(&mut m, &train, &tcfg)?;
                    result
                        .metrics
                        .push(format!("{}\t{gi}\tmwer\t{:.6}\t-\t{:.6e}", setup.id, r.mean_loss, tcfg.mwer.lr));
                }
                m
            }
        };
        let cells: Vec<(usize, usize)> = all_cells
            .iter()
            .copied()
            .filter(|&(d, m)| fd.is_none_or(|x| x == d) && fm.is_none_or(|x| x == m))
            .collect();
        result.report.cells.extend(evaluate_cells(&model, data, &cells, &cfg.beam)?);
        if let Some(dir) = out_dir {
            let name = match (fd, fm) {
                (None, _) => "model.ckpt".to_string(),
                (Some(d), None) => format!("model-{}.ckpt", CerReport::name_of(&data.dialects, d)),
                (Some(d), Some(m)) => format!(
                    "model-{}-{}.ckpt",
                    CerReport::name_of(&data.dialects, d),
                    CerReport::name_of(&data.domains, m)
                ),
            };
            let path = dir.join(setup.id.name()).join(name);
            checkpoint::save(&model, &path)?;
            result.checkpoints.push(path);
        }
        result.models.push(model);
    }
    result.report.cells.sort_by_key(|c| (c.dialect, c.domain));
    Ok(result)
}

fn tag_lines(id: SetupId, group: usize, lines: &[String]) -> Vec<String> {
    lines.iter().map(|l| format!("{id}\t{group}\t{l}")).collect()
}

/// Runs `ids` in dependency order; fine-tuned variants reuse the joint
/// model trained earlier in the same run, or the checkpoint in `warm_paths`.
pub fn run_matrix<T: Scalar>(
    ids: &[SetupId],
    data: &PreparedData<T>,
    cfg: &HarnessConfig,
    warm_paths: &BTreeMap<SetupId, PathBuf>,
    out_dir: Option<&Path>,
) -> Result<Vec<SetupResult<T>>> {
    let mut order: Vec<SetupId> = ids.to_vec();
    order.sort_by_key(|id| id.warm_start().is_some());
    let mut joint: BTreeMap<SetupId, LasModel<T>> = BTreeMap::new();
    let mut results: BTreeMap<SetupId, SetupResult<T>> = BTreeMap::new();
    for id in order {
        let mut setup = ExperimentSetup::new(id);
        if let Some(base) = id.warm_start() {
            setup.warm_start = warm_paths.get(&base).cloned();
        }
        let warm = id.warm_start().and_then(|b| joint.get(&b));
        let r = run_setup(&setup, data, cfg, warm, out_dir)?;
        if matches!(id, SetupId::S2 | SetupId::S5) {
            joint.insert(id, r.models[0].clone());
        }
        results.insert(id, r);
    }
    Ok(ids.iter().filter_map(|id| results.remove(id)).collect())
}
