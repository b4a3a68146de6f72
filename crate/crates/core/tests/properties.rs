use std::collections::HashMap;

use condseq::autograd::Graph;
use condseq::bpe::{train_bpe, UNK};
use condseq::eval::{cer, edit_distance, ErrorCount};
use condseq::model::{InjectionMode, LasModel, ModelConfig};
use condseq::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;

/// Top-down memoized Levenshtein recursion.
fn levenshtein_oracle(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

const ALPHA: &str = "[abcdeé中文]{0,12}";

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn edit_distance_matches_oracle(a in ALPHA, b in ALPHA) {
        let (x, y) = (chars(&a), chars(&b));
        prop_assert_eq!(edit_distance(&x, &y), levenshtein_oracle(&x, &y));
    }

    #[test]
    fn bpe_round_trip(text in "[abcd中 ]{0,30}", merges in 0usize..40) {
        let corpus = ["abcab cabd 中中a", "dcba abab", "中abc d"];
        let bpe = train_bpe(&corpus, merges).unwrap();
        let ids = bpe.encode(&text);
        prop_assert!(!ids.contains(&UNK));
        prop_assert_eq!(bpe.decode(&ids).unwrap(), normalize(&text));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn edit_distance_is_a_metric(a in ALPHA, b in ALPHA, c in ALPHA) {
        let (x, y, z) = (chars(&a), chars(&b), chars(&c));
        let d = |p: &[char], q: &[char]| edit_distance(p, q);
        prop_assert_eq!(d(&x, &y), d(&y, &x));
        prop_assert_eq!(d(&x, &x), 0);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z));
        prop_assert!(d(&x, &y) <= x.len().max(y.len()));
        prop_assert!(d(&x, &y) >= x.len().abs_diff(y.len()));
    }

    #[test]
    fn corpus_cer_pools_edits(pairs in prop::collection::vec(("[ab]{1,6}", "[ab]{0,6}"), 1..6)) {
        let mut count = ErrorCount::default();
        let (mut e, mut n) = (0.0, 0.0);
        for (r, h) in &pairs {
            count.add(r, h);
            let c = cer(r, h).unwrap();
            let len = r.chars().count() as f64;
            e += c * len;
            n += len;
        }
        prop_assert!((count.rate() - e / n).abs() < 1e-12);
    }

    #[test]
    fn bpe_training_is_deterministic_and_prefix_stable(
        corpus in prop::collection::vec("[abc]{1,8}( [abc]{1,8}){0,3}", 1..8),
        k in 0usize..12,
        extra in 0usize..12,
    ) {
        let a = train_bpe(&corpus, k).unwrap();
        let b = train_bpe(&corpus, k).unwrap();
        prop_assert_eq!(&a, &b);
        let longer = train_bpe(&corpus, k + extra).unwrap();
        prop_assert_eq!(a.merges(), &longer.merges()[..a.merges().len()]);
        for line in &corpus {
            // more merges never lengthen an encoding
            prop_assert!(longer.encode(line).len() <= a.encode(line).len());
        }
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![3, 4], data).unwrap());
        let s = g.softmax(x, axis).unwrap();
        let ls = g.log_softmax(x, axis).unwrap();
        let (sv, lv) = (g.value(s).to_vec(), g.value(ls).to_vec());
        let (outer, n, stride) = if axis == 1 { (3, 4, 1) } else { (4, 3, 4) };
        for o in 0..outer {
            let base = if axis == 1 { o * 4 } else { o };
            let total: f64 = (0..n).map(|j| sv[base + j * stride]).sum();
            let total_log: f64 = (0..n).map(|j| lv[base + j * stride].exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!((total_log - 1.0).abs() < 1e-12);
        }
        prop_assert!(sv.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn encoder_length_is_ceil_of_ratio(frames in 1usize..40, n in 1usize..5, layers in 1usize..3) {
        let mut cfg = ModelConfig::desk(5, 2).with_inject(InjectionMode::None);
        cfg.reduction = n;
        cfg.enc_layers = layers;
        cfg.enc_cells = 3;
        cfg.enc_proj = 3;
        let m = LasModel::<f64>::new(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let b = m.net.bind(&mut g, &m.params, false);
        let x = g.constant(&Tensor::full(&[frames, 2], 0.3));
        let enc = m.net.encode(&mut g, &b, x).unwrap();
        prop_assert_eq!(enc.len, frames.div_ceil(n));
        prop_assert_eq!(cfg.encoder_len(frames), frames.div_ceil(n));
        prop_assert_eq!(g.shape(enc.memory), &[frames.div_ceil(n), cfg.memory_dim()][..]);
    }

    #[test]
    fn attention_weights_are_distributions(frames in 1usize..9, seed in 0u64..1000) {
        let cfg = ModelConfig::desk(5, 2);
        let m = LasModel::<f64>::new(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut g = Graph::new();
        let b = m.net.bind(&mut g, &m.params, false);
        let x = g.constant(&Tensor::from_fn(&[frames, 2], |i| (i as f64 * 0.37).sin()));
        let enc = m.net.encode(&mut g, &b, x).unwrap();
        let q = g.constant(&Tensor::from_fn(&[1, cfg.dec_cells], |i| (i as f64).cos()));
        let (_, betas) = m.net.attend(&mut g, &b, &enc, q).unwrap();
        for beta in betas {
            let v = g.value(beta);
            prop_assert_eq!(v.len(), enc.len);
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cer_rejects_empty_reference() {
    assert!(cer("", "a").is_err());
    assert_eq!(cer("abc", "abc").unwrap(), 0.0);
    assert!((cer("abcd", "abd").unwrap() - 0.25).abs() < 1e-15);
}
