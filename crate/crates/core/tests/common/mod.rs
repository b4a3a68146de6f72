#![allow(dead_code)]

use condseq::autograd::Graph;
use condseq::conditioning::CategoricalSpec;
use condseq::model::{InjectionMode, LasModel, ModelConfig};
use condseq::tensor::Tensor;
use condseq::trainer::ce_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let x: f64 = StandardNormal.sample(rng);
        scale * x
    })
}

/// A network small enough for exhaustive checks.
pub fn toy_config(vocab: usize, d_feat: usize, inject: InjectionMode) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        enc_cells: 3,
        enc_proj: 3,
        reduction: 2,
        att_heads: 1,
        att_dim: 4,
        dec_layers: 1,
        dec_cells: 4,
        vocab_size: vocab,
        d_feat,
        inject,
        cond: CategoricalSpec::dialect_domain(2),
        cond_enc_dim: 2,
        cond_dec_dim: 3,
    }
}

/// Initializes a model and multiplies every parameter by `gain`.
pub fn scaled_model(cfg: &ModelConfig, seed: u64, gain: f64) -> LasModel<f64> {
    let mut m = LasModel::new(cfg, &mut rng(seed)).unwrap();
    let names: Vec<String> = m.params.names().to_vec();
    for n in names {
        m.params
            .get_mut(&n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= gain);
    }
    m
}

/// Fills every conditioning tensor with random values so that none of the
/// zero-initialized biases hide a wiring error.
pub fn randomize_conditioning(m: &mut LasModel<f64>, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = m
        .params
        .names()
        .iter()
        .filter(|n| n.starts_with("cond."))
        .cloned()
        .collect();
    for n in names {
        for v in m.params.get_mut(&n).unwrap().data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
}

/// Teacher-forced smoothed cross-entropy of one utterance.
pub fn ce_of(m: &LasModel<f64>, feats: &Tensor<f64>, cond: &[usize], targets: &[usize], eps: f64) -> f64 {
    let mut g = Graph::new();
    let b = m.net.bind(&mut g, &m.params, false);
    let prep = m.net.prepare(&mut g, &b, feats, cond).unwrap();
    let logits = m.net.teacher_forced(&mut g, &b, &prep, targets).unwrap();
    let loss = ce_loss(&mut g, &logits, targets, eps).unwrap();
    g.item(loss)
}

pub const MODES: [InjectionMode; 4] = [
    InjectionMode::None,
    InjectionMode::Encoder,
    InjectionMode::Decoder,
    InjectionMode::Both,
];
