//! Synthetic multi-dialect, multi-domain paired corpus.
//!
//! Every token type owns a base frame template (2–4 frames drawn from a unit
//! Gaussian). Most tokens sound the same in every dialect. A fraction of token
//! types, the ambiguous set, is pronounced differently per dialect: dialect
//! `d` renders ambiguous token `t` with the base template of `σ_d(t)`, where
//! `σ_0` is the identity and every other `σ_d` is a derangement of the set.
//! The same acoustics therefore mean different tokens in different dialects,
//! and only the dialect id disambiguates them. Token sequences come from a
//! sparse per-domain bigram grammar over the shared vocabulary.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Symbol inventory of the synthetic language; token id `i` renders as `SYMBOLS[i]`.
pub const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const FEATURE_FILE: &str = "features.bin";
const MANIFEST_TAG: &str = "#condseq-manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// FNV-1a, stable across platforms and toolchains.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Split membership is a pure function of the utterance id.
pub fn split_of(id: &str) -> Split {
    match fnv1a(id) % 10 {
        0 => Split::Test,
        1 => Split::Dev,
        _ => Split::Train,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Row-major `[num_frames × d_feat]`.
    pub features: Vec<f32>,
    pub num_frames: usize,
    pub d_feat: usize,
    /// Synthetic symbol ids (indices into [`SYMBOLS`]).
    pub tokens: Vec<usize>,
    pub dialect: usize,
    pub domain: usize,
}

impl Utterance {
    pub fn text(&self) -> String {
        tokens_to_text(&self.tokens)
    }

    pub fn split(&self) -> Split {
        split_of(&self.id)
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.features[i * self.d_feat..(i + 1) * self.d_feat]
    }
}

pub fn tokens_to_text(tokens: &[usize]) -> String {
    let sym: Vec<char> = SYMBOLS.chars().collect();
    tokens.iter().map(|&t| sym[t]).collect()
}

pub fn text_to_tokens(text: &str) -> Option<Vec<usize>> {
    text.chars().map(|c| SYMBOLS.find(c)).collect()
}

/// Requested utterance counts for one (dialect, domain) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCounts {
    pub dialect: usize,
    pub domain: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusProfile {
    pub dialects: Vec<String>,
    pub domains: Vec<String>,
    pub cells: Vec<CellCounts>,
    pub vocab_size: usize,
    /// Fraction of token types whose template collides across dialects.
    pub ambiguity: f64,
    /// Standard deviation of additive Gaussian frame noise.
    pub noise: f64,
    pub d_feat: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Successors per token in each domain's bigram grammar.
    pub branching: usize,
}

pub const DIALECTS: [&str; 4] = ["mandarin", "cantonese", "taiwanese", "shanghainese"];
pub const DOMAINS: [&str; 6] = ["ast", "car", "home", "map", "msg", "srch"];

/// Training hours per Mandarin domain; `map` takes the remainder of 18k.
const MANDARIN_HOURS: [(usize, f64); 6] = [
    (0, 7000.0),
    (1, 400.0),
    (2, 2000.0),
    (3, 4100.0),
    (4, 4000.0),
    (5, 500.0),
];

impl CorpusProfile {
    /// Resource skew after the 18k/7k/3k/0.1k-hour dialect table, one
    /// utterance per `hours_per_utt` hours, with every cell given at least
    /// `min_train` training utterances and fixed dev/test sizes.
    pub fn dialect_skew(hours_per_utt: f64, min_train: usize, dev: usize, test: usize) -> Self {
        let totals = [18_000.0, 7_000.0, 3_000.0, 100.0];
        let mandarin_total: f64 = MANDARIN_HOURS.iter().map(|(_, h)| h).sum();
        let mut cells = Vec::new();
        for (d, &total) in totals.iter().enumerate() {
            if d == 3 {
                // lowest-resource dialect only has the message domain
                cells.push(CellCounts {
                    dialect: d,
                    domain: 4,
                    train: ((total / hours_per_utt).round() as usize).max(min_train),
                    dev,
                    test,
                });
                continue;
            }
            for &(m, h) in &MANDARIN_HOURS {
                let hours = total * h / mandarin_total;
                cells.push(CellCounts {
                    dialect: d,
                    domain: m,
                    train: ((hours / hours_per_utt).round() as usize).max(min_train),
                    dev,
                    test,
                });
            }
        }
        CorpusProfile {
            dialects: DIALECTS.iter().map(|s| s.to_string()).collect(),
            domains: DOMAINS.iter().map(|s| s.to_string()).collect(),
            cells,
            vocab_size: 16,
            ambiguity: 0.5,
            noise: 0.8,
            d_feat: 16,
            min_tokens: 3,
            max_tokens: 6,
            branching: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.vocab_size == 0 || self.vocab_size > SYMBOLS.len() {
            return bad(format!("vocab_size must be in 1..={}", SYMBOLS.len()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad("ambiguity must be in [0, 1]".into());
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return bad("noise must be a finite non-negative value".into());
        }
        if self.d_feat == 0 || self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return bad("d_feat and token length bounds must be positive and ordered".into());
        }
        if self.branching == 0 {
            return bad("branching must be positive".into());
        }
        for c in &self.cells {
            if c.dialect >= self.dialects.len() || c.domain >= self.domains.len() {
                return bad(format!("cell ({}, {}) out of range", c.dialect, c.domain));
            }
        }
        if self.total() == 0 {
            return bad("profile requests zero utterances".into());
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.train + c.dev + c.test).sum()
    }

    pub fn train_count_for_dialect(&self, d: usize) -> usize {
        self.cells.iter().filter(|c| c.dialect == d).map(|c| c.train).sum()
    }
}

/// Frame templates and grammars of one seeded synthetic language.
#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    d_feat: usize,
    vocab: usize,
    base: Vec<Vec<f32>>,
    /// `render[d][t]` is the base template index used for token `t` in dialect `d`.
    render: Vec<Vec<usize>>,
    ambiguous: Vec<usize>,
    start: Vec<Vec<f64>>,
    transitions: Vec<Vec<Vec<(usize, f64)>>>,
}

fn derangement(items: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let mut perm = items.to_vec();
    if items.len() < 2 {
        return perm;
    }
    loop {
        perm.shuffle(rng);
        if perm.iter().zip(items).all(|(a, b)| a != b) {
            return perm;
        }
    }
}

fn sample_weighted(weights: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(t, w) in weights {
        if u < w {
            return t;
        }
        u -= w;
    }
    weights.last().expect("non-empty weights").0
}

impl SyntheticLanguage {
    pub fn new(profile: &CorpusProfile, rng: &mut ChaCha8Rng) -> Self {
        let v = profile.vocab_size;
        let d = profile.d_feat;
        let base: Vec<Vec<f32>> = (0..v)
            .map(|_| {
                let len = rng.random_range(2..=4usize);
                (0..len * d)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(rng);
                        x as f32
                    })
                    .collect()
            })
            .collect();
        let mut order: Vec<usize> = (0..v).collect();
        order.shuffle(rng);
        let mut n_amb = (profile.ambiguity * v as f64).round() as usize;
        if n_amb == 1 {
            // a single token cannot collide with another
            n_amb = if v >= 2 { 2 } else { 0 };
        }
        let mut ambiguous: Vec<usize> = order[..n_amb].to_vec();
        ambiguous.sort_unstable();
        let render = (0..profile.dialects.len())
            .map(|dialect| {
                let mut map: Vec<usize> = (0..v).collect();
                if dialect > 0 {
                    let perm = derangement(&ambiguous, rng);
                    for (&t, &p) in ambiguous.iter().zip(&perm) {
                        map[t] = p;
                    }
                }
                map
            })
            .collect();
        let k = profile.branching.min(v);
        let mut start = Vec::new();
        let mut transitions = Vec::new();
        for _ in 0..profile.domains.len() {
            start.push((0..v).map(|_| rng.random::<f64>() + 0.05).collect());
            let rows = (0..v)
                .map(|_| {
                    let mut succ: Vec<usize> = (0..v).collect();
                    succ.shuffle(rng);
                    succ[..k]
                        .iter()
                        .map(|&s| (s, rng.random::<f64>() + 0.2))
                        .collect()
                })
                .collect();
            transitions.push(rows);
        }
        SyntheticLanguage {
            d_feat: d,
            vocab: v,
            base,
            render,
            ambiguous,
            start,
            transitions,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn ambiguous_tokens(&self) -> &[usize] {
        &self.ambiguous
    }

    /// Noise-free frames of `token` spoken in `dialect`.
    pub fn template(&self, token: usize, dialect: usize) -> &[f32] {
        &self.base[self.render[dialect][token]]
    }

    pub fn template_frames(&self, token: usize, dialect: usize) -> usize {
        self.template(token, dialect).len() / self.d_feat
    }

    pub fn sample_tokens(&self, domain: usize, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let start: Vec<(usize, f64)> = self.start[domain].iter().copied().enumerate().collect();
        let mut out = vec![sample_weighted(&start, rng)];
        while out.len() < len {
            let prev = *out.last().expect("non-empty");
            out.push(sample_weighted(&self.transitions[domain][prev], rng));
        }
        out
    }

    pub fn render(&self, tokens: &[usize], dialect: usize, noise: f64, rng: &mut impl Rng) -> Vec<f32> {
        let mut out = Vec::new();
        for &t in tokens {
            out.extend(self.template(t, dialect).iter().map(|&x| {
                if noise > 0.0 {
                    let n: f64 = StandardNormal.sample(rng);
                    (x as f64 + noise * n) as f32
                } else {
                    x
                }
            }));
        }
        out
    }
}

/// Generates the corpus described by `profile`. Deterministic in `seed`.
pub fn generate_corpus(profile: &CorpusProfile, seed: u64) -> Result<Vec<Utterance>> {
    Ok(generate_with_language(profile, seed)?.1)
}

/// Like [`generate_corpus`], also returning the language that produced it.
pub fn generate_with_language(
    profile: &CorpusProfile,
    seed: u64,
) -> Result<(SyntheticLanguage, Vec<Utterance>)> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lang = SyntheticLanguage::new(profile, &mut rng);
    let mut utts = Vec::with_capacity(profile.total());
    for cell in &profile.cells {
        let mut need = [cell.train, cell.dev, cell.test];
        let mut n = 0usize;
        while need.iter().any(|&k| k > 0) {
            let id = format!(
                "{}-{}-{:05}",
                profile.dialects[cell.dialect], profile.domains[cell.domain], n
            );
            n += 1;
            let slot = match split_of(&id) {
                Split::Train => 0,
                Split::Dev => 1,
                Split::Test => 2,
            };
            if need[slot] == 0 {
                continue;
            }
            need[slot] -= 1;
            let len = rng.random_range(profile.min_tokens..=profile.max_tokens);
            let tokens = lang.sample_tokens(cell.domain, len, &mut rng);
            let features = lang.render(&tokens, cell.dialect, profile.noise, &mut rng);
            let num_frames = features.len() / profile.d_feat;
            utts.push(Utterance {
                id,
                features,
                num_frames,
                d_feat: profile.d_feat,
                tokens,
                dialect: cell.dialect,
                domain: cell.domain,
            });
        }
    }
    Ok((lang, utts))
}

/// Writes `manifest.tsv` and `features.bin` into `dir`; returns the manifest path.
pub fn write_corpus(utts: &[Utterance], dir: &Path, d_feat: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let d_feat = utts.first().map_or(d_feat, |u| u.d_feat);
    let mut manifest = format!("{MANIFEST_TAG} d_feat={d_feat}\n");
    if !utts.is_empty() {
        let mut feats = BufWriter::new(File::create(dir.join(FEATURE_FILE))?);
        let mut offset = 0usize;
        for u in utts {
            if u.d_feat != d_feat || u.features.len() != u.num_frames * d_feat {
                return Err(Error::Input(format!(
                    "utterance `{}` has inconsistent feature dimensions",
                    u.id
                )));
            }
            for &x in &u.features {
                feats.write_all(&x.to_le_bytes())?;
            }
            let _ = writeln!(
                manifest,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                u.id,
                u.dialect,
                u.domain,
                FEATURE_FILE,
                offset,
                u.num_frames,
                u.text()
            );
            offset += u.features.len() * 4;
        }
        feats.flush()?;
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest)?;
    Ok(path)
}

pub fn read_corpus(manifest: &Path) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let perr = |line: usize, msg: String| Error::Parse {
        path: manifest.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr(1, "empty manifest".into()))?;
    let d_feat = header
        .strip_prefix(MANIFEST_TAG)
        .and_then(|r| r.trim().strip_prefix("d_feat="))
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| perr(1, format!("expected `{MANIFEST_TAG} d_feat=<n>`")))?;
    let mut cache: std::collections::HashMap<String, Vec<u8>> = Default::default();
    let mut utts = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(perr(lineno, format!("expected 7 tab-separated fields, found {}", cols.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| perr(lineno, format!("invalid {what} `{s}`")))
        };
        let id = cols[0].to_string();
        let dialect = num(cols[1], "dialect")?;
        let domain = num(cols[2], "domain")?;
        let offset = num(cols[4], "byte offset")?;
        let num_frames = num(cols[5], "frame count")?;
        let tokens = text_to_tokens(cols[6])
            .filter(|t| !t.is_empty())
            .ok_or_else(|| perr(lineno, format!("invalid token text `{}`", cols[6])))?;
        if num_frames == 0 {
            return Err(perr(lineno, "frame count must be positive".into()));
        }
        if !cache.contains_key(cols[3]) {
            let mut buf = Vec::new();
            File::open(dir.join(cols[3]))?.read_to_end(&mut buf)?;
            cache.insert(cols[3].to_string(), buf);
        }
        let bytes = &cache[cols[3]];
        let need = num_frames * d_feat * 4;
        let avail = bytes.len().saturating_sub(offset);
        if avail < need {
            return Err(Error::SizeMismatch {
                id,
                expected: need,
                found: avail,
            });
        }
        let features = bytes[offset..offset + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        utts.push(Utterance {
            id,
            features,
            num_frames,
            d_feat,
            tokens,
            dialect,
            domain,
        });
    }
    Ok(utts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_profile() -> CorpusProfile {
        let mut p = CorpusProfile::dialect_skew(1000.0, 1, 1, 1);
        p.cells.truncate(1);
        p.cells[0] = CellCounts {
            dialect: 0,
            domain: 0,
            train: 1,
            dev: 0,
            test: 0,
        };
        p.ambiguity = 0.0;
        p.noise = 0.0;
        p
    }

    #[test]
    fn noiseless_features_are_templates() {
        let p = tiny_profile();
        let (lang, utts) = generate_with_language(&p, 3).unwrap();
        assert_eq!(utts.len(), 1);
        let u = &utts[0];
        let expect: Vec<f32> = u
            .tokens
            .iter()
            .flat_map(|&t| lang.template(t, 0).iter().copied())
            .collect();
        assert_eq!(u.features, expect);
        assert!(u.num_frames >= u.tokens.len());
    }

    #[test]
    fn zero_total_is_rejected() {
        let mut p = tiny_profile();
        p.cells[0].train = 0;
        assert!(matches!(generate_corpus(&p, 1), Err(Error::Input(_))));
    }

    #[test]
    fn split_is_a_function_of_id() {
        let p = CorpusProfile::dialect_skew(200.0, 2, 3, 4);
        let utts = generate_corpus(&p, 11).unwrap();
        for c in &p.cells {
            let cell: Vec<_> = utts
                .iter()
                .filter(|u| u.dialect == c.dialect && u.domain == c.domain)
                .collect();
            let count = |s| cell.iter().filter(|u| u.split() == s).count();
            assert_eq!(count(Split::Train), c.train);
            assert_eq!(count(Split::Dev), c.dev);
            assert_eq!(count(Split::Test), c.test);
        }
    }

    #[test]
    fn lowest_resource_dialect_has_one_domain() {
        let p = CorpusProfile::dialect_skew(100.0, 1, 1, 1);
        let cells: Vec<_> = p.cells.iter().filter(|c| c.dialect == 3).collect();
        assert_eq!(cells.len(), 1);
        assert_eq!(p.domains[cells[0].domain], "msg");
        // per-cell rounding moves each total by at most half a unit per cell
        for (d, want) in [(0, 180usize), (1, 70), (2, 30), (3, 1)] {
            assert!(p.train_count_for_dialect(d).abs_diff(want) <= 3, "dialect {d}");
        }
    }

    #[test]
    fn ambiguous_templates_collide_across_dialects() {
        let p = CorpusProfile::dialect_skew(100.0, 1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lang = SyntheticLanguage::new(&p, &mut rng);
        assert_eq!(lang.ambiguous_tokens().len(), 8);
        for &t in lang.ambiguous_tokens() {
            for d in 1..4 {
                assert_ne!(lang.template(t, d), lang.template(t, 0));
                let partner = (0..p.vocab_size)
                    .find(|&u| lang.template(u, 0) == lang.template(t, d))
                    .unwrap();
                assert!(lang.ambiguous_tokens().contains(&partner));
            }
        }
    }

    #[test]
    fn empty_corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(&[], dir.path(), 16).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "#condseq-manifest v1 d_feat=16\n");
        assert!(read_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        std::fs::write(&path, "#condseq-manifest v1 d_feat=4\nbad\tline\n").unwrap();
        match read_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_features_name_the_utterance() {
        let p = CorpusProfile::dialect_skew(1000.0, 2, 0, 0);
        let utts = generate_corpus(&p, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(&utts, dir.path(), 16).unwrap();
        let feats = dir.path().join(FEATURE_FILE);
        let len = std::fs::metadata(&feats).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&feats).unwrap();
        f.set_len(len - 8).unwrap();
        match read_corpus(&path) {
            Err(Error::SizeMismatch { id, .. }) => assert_eq!(id, utts.last().unwrap().id),
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }
}
