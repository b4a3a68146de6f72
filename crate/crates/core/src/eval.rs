//! Edit distance and character error rate.

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character edit distance divided by the reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Input("CER needs a non-empty reference".into()));
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Corpus-level accumulator: total edits over total reference characters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCount {
    pub edits: usize,
    pub ref_len: usize,
}

impl ErrorCount {
    pub fn add(&mut self, reference: &str, hypothesis: &str) {
        let r: Vec<char> = reference.chars().collect();
        let h: Vec<char> = hypothesis.chars().collect();
        self.edits += edit_distance(&r, &h);
        self.ref_len += r.len();
    }

    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.edits as f64 / self.ref_len as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert_eq!(cer("abcd", "abed").unwrap(), 0.25);
        assert_eq!(cer("ab", "").unwrap(), 1.0);
        assert!(matches!(cer("", "x"), Err(Error::Input(_))));
    }

    #[test]
    fn accumulates() {
        let mut c = ErrorCount::default();
        c.add("ab", "");
        c.add("abcd", "abcd");
        assert_eq!(c, ErrorCount { edits: 2, ref_len: 6 });
    }
}
