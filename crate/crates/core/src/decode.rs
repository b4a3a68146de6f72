//! Beam-search decoding with GNMT length normalization.

use std::cmp::Ordering;

use crate::autograd::Graph;
use crate::bpe::EOS;
use crate::error::{Error, Result};
use crate::model::{DecoderStepState, LasModel, LasNet};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Length-penalty exponent α.
    pub len_penalty: f64,
    /// Step limit; `None` means `2·T + 10`.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 8,
            len_penalty: 0.1,
            max_len: None,
        }
    }
}

/// `((5 + len) / 6)^α`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens, ending in `<eos>` when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / lp(|tokens|)`.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing `<eos>`.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecoderStepState,
}

fn log_softmax_f64<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let x: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Returns up to `beam` hypotheses, best first. Finished hypotheses are
/// preferred; unfinished ones are returned only when none finished within
/// the step limit.
pub fn beam_search<T: Scalar>(
    model: &LasModel<T>,
    feats: &Tensor<T>,
    cond_ids: &[usize],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    beam_search_with(&model.net, &model.params, feats, cond_ids, cfg)
}

pub fn beam_search_with<T: Scalar>(
    net: &LasNet,
    params: &ParamStore<T>,
    feats: &Tensor<T>,
    cond_ids: &[usize],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let mut g = Graph::new();
    let b = net.bind(&mut g, params, false);
    let prep = net.prepare(&mut g, &b, feats, cond_ids)?;
    let max_len = cfg.max_len.unwrap_or(2 * prep.enc.len + 10);
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let alpha = cfg.len_penalty;
    let best_possible_lp = (1..=max_len)
        .map(|n| length_penalty(n, alpha))
        .fold(f64::NEG_INFINITY, f64::max);
    let init = net.initial_state(&mut g);
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: init,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (k, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(crate::bpe::SOS);
            let (st, logits) = net.decode_step(&mut g, &b, &prep.enc, prev, &h.state, prep.e_dec)?;
            let lp = log_softmax_f64(g.value(logits));
            for (v, l) in lp.into_iter().enumerate() {
                cands.push((h.log_prob + l, v, k));
            }
            next_states.push(st);
        }
        // candidates share a length, so raw and penalized orders agree
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(lp, v, k) in cands.iter().take(cfg.beam) {
            let mut tokens = live[k].tokens.clone();
            tokens.push(v);
            if v == EOS {
                let score = lp / length_penalty(tokens.len(), alpha);
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    score,
                    finished: true,
                });
            } else {
                next.push(Live {
                    tokens,
                    log_prob: lp,
                    state: next_states[k].clone(),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= cfg.beam {
            finished.sort_by(rank);
            let kth = finished[cfg.beam - 1].score;
            // log-probs only fall as tokens are appended
            let bound = live
                .iter()
                .map(|h| h.log_prob / best_possible_lp)
                .fold(f64::NEG_INFINITY, f64::max);
            if kth >= bound {
                break;
            }
        }
    }
    let mut out = if finished.is_empty() {
        live.into_iter()
            .map(|h| Hypothesis {
                score: h.log_prob / length_penalty(h.tokens.len(), alpha),
                tokens: h.tokens,
                log_prob: h.log_prob,
                finished: false,
            })
            .collect()
    } else {
        finished
    };
    out.sort_by(rank);
    out.truncate(cfg.beam);
    Ok(out)
}
