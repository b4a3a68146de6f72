//! Byte-pair-encoding token inventories.
//!
//! Text is split on whitespace and every word gets a trailing end-of-word
//! symbol before merging. Ids 0, 1 and 2 are reserved for `<sos>`, `<eos>` and
//! `<unk>`; base symbols follow in sorted order, then merged tokens in the
//! order they were learned.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";
/// Appended to every word before merging.
pub const END_OF_WORD: &str = "</w>";
/// What `<unk>` decodes to.
pub const UNK_GLYPH: char = '\u{FFFD}';

const HEADER: &str = "#condseq-bpe v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    vocab: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .map(|c| c.to_string())
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect()
}

/// Greedy pair-merge training. Ties go to the lexicographically smallest
/// `(left, right)` pair; training stops early once no pair occurs.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot train BPE on an empty corpus".into()));
    }
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            if w.contains(END_OF_WORD) {
                return Err(Error::Input(format!(
                    "training text may not contain the end-of-word marker {END_OF_WORD}"
                )));
            }
            *word_counts.entry(w).or_default() += 1;
        }
    }
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .iter()
        .map(|(w, &n)| {
            let syms = word_symbols(w);
            alphabet.extend(syms.iter().cloned());
            (syms, n)
        })
        .collect();
    alphabet.insert(END_OF_WORD.to_string());

    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, n) in &words {
            for pair in syms.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_default() += n;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first maximum wins ties.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &n) in &counts {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((pair, n));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for (syms, _) in &mut words {
            apply_merge(syms, &l, &r);
        }
        merges.push((l, r));
    }
    Ok(BpeModel::from_parts(merges, alphabet.into_iter().collect()))
}

fn apply_merge(syms: &mut Vec<String>, l: &str, r: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == l && syms[i + 1] == r {
            let right = syms.remove(i + 1);
            syms[i].push_str(&right);
        }
        i += 1;
    }
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, alphabet: Vec<String>) -> Self {
        let mut tokens: Vec<String> = vec![SOS_TOKEN.into(), EOS_TOKEN.into(), UNK_TOKEN.into()];
        let mut vocab: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut add = |t: String, tokens: &mut Vec<String>| {
            if !vocab.contains_key(&t) {
                vocab.insert(t.clone(), tokens.len());
                tokens.push(t);
            }
        };
        for s in alphabet {
            add(s, &mut tokens);
        }
        for (l, r) in &merges {
            add(format!("{l}{r}"), &mut tokens);
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        BpeModel {
            merges,
            tokens,
            vocab,
            ranks,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.vocab.get(token).copied()
    }

    /// Encodes `text`; characters outside the training alphabet map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            let mut syms = word_symbols(w);
            // Lowest-rank adjacent pair first; equivalent to replaying merges in order.
            loop {
                let best = syms
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, p)| {
                        self.ranks
                            .get(&(p[0].clone(), p[1].clone()))
                            .map(|&rank| (rank, i))
                    })
                    .min();
                let Some((rank, _)) = best else { break };
                let (l, r) = &self.merges[rank];
                apply_merge(&mut syms, l, r);
            }
            out.extend(syms.iter().map(|s| self.vocab.get(s).copied().unwrap_or(UNK)));
        }
        out
    }

    /// Concatenates token strings with end-of-word markers turned into single
    /// spaces, drops `<sos>`/`<eos>`, and writes `<unk>` as U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id)
                .ok_or_else(|| Error::Input(format!("token id {id} out of range")))?;
            match id {
                SOS | EOS => {}
                UNK => out.push(UNK_GLYPH),
                _ => match tok.strip_suffix(END_OF_WORD) {
                    Some(stem) => {
                        out.push_str(stem);
                        out.push(' ');
                    }
                    None => out.push_str(tok),
                },
            }
        }
        if out.ends_with(' ') {
            out.pop();
        }
        Ok(out)
    }

    /// Text serialization: header, merge pairs, then `token\tid` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER} vocab_size={} merges={}\n",
            self.tokens.len(),
            self.merges.len()
        );
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l}\t{r}");
        }
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let rest = header
            .strip_prefix(HEADER)
            .ok_or_else(|| perr(1, format!("expected header `{HEADER}`")))?;
        let mut vocab_size = None;
        let mut n_merges = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("vocab_size", v)) => vocab_size = v.parse::<usize>().ok(),
                Some(("merges", v)) => n_merges = v.parse::<usize>().ok(),
                _ => return Err(perr(1, format!("unexpected header field `{kv}`"))),
            }
        }
        let (vocab_size, n_merges) = vocab_size
            .zip(n_merges)
            .ok_or_else(|| perr(1, "header needs vocab_size and merges".into()))?;
        let mut merges = Vec::with_capacity(n_merges);
        for i in 0..n_merges {
            let line = lines.next().ok_or_else(|| perr(i + 2, "missing merge".into()))?;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| perr(i + 2, "merge must be `left\\tright`".into()))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let mut tokens = Vec::with_capacity(vocab_size);
        for i in 0..vocab_size {
            let lineno = n_merges + i + 2;
            let line = lines.next().ok_or_else(|| perr(lineno, "missing vocab entry".into()))?;
            let (t, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| perr(lineno, "vocab entry must be `token\\tid`".into()))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(perr(lineno, format!("expected dense id {i}, found `{id}`")));
            }
            tokens.push(t.to_string());
        }
        let alphabet: Vec<String> = tokens[3..]
            .iter()
            .filter(|t| t.chars().count() == 1 || t.as_str() == END_OF_WORD)
            .cloned()
            .collect();
        let model = BpeModel::from_parts(merges, alphabet);
        if model.tokens != tokens {
            return Err(perr(1, "vocabulary is inconsistent with the merge list".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_merges_is_character_level() {
        let m = train_bpe(&["abc", "cab"], 0).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.vocab_size(), 3 + 4); // specials + a b c </w>
        assert_eq!(m.encode("ab").len(), 3);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let m = train_bpe(&["aaab", "aab"], 1).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(train_bpe(&empty, 3), Err(Error::Input(_))));
    }

    #[test]
    fn empty_string_encodes_empty() {
        let m = train_bpe(&["hello world"], 5).unwrap();
        assert!(m.encode("").is_empty());
        assert_eq!(m.decode(&[]).unwrap(), "");
    }

    #[test]
    fn unknown_chars_become_unk_glyph() {
        let m = train_bpe(&["abab"], 2).unwrap();
        let ids = m.encode("abz");
        assert!(ids.contains(&UNK));
        assert_eq!(m.decode(&ids).unwrap(), "ab\u{FFFD}");
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let m = train_bpe(&["ab"], 0).unwrap();
        assert!(matches!(m.decode(&[99]), Err(Error::Input(_))));
    }

    #[test]
    fn decode_strips_specials() {
        let m = train_bpe(&["ab"], 0).unwrap();
        let mut ids = vec![SOS];
        ids.extend(m.encode("ab"));
        ids.push(EOS);
        assert_eq!(m.decode(&ids).unwrap(), "ab");
    }

    #[test]
    fn text_roundtrip() {
        let m = train_bpe(&["the cat sat on the mat", "a cat"], 12).unwrap();
        let back = BpeModel::from_text(&m.to_text(), Path::new("mem")).unwrap();
        assert_eq!(m, back);
    }
}
