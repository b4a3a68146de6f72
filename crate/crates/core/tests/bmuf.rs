mod common;

use condseq::bmuf::*;
use condseq::params::{Grads, ParamStore};
use condseq::tensor::Tensor;
use condseq::trainer::*;
use condseq::Result;
use rand::Rng;

use common::*;

/// `f_i(w) = ½‖w − a_i‖²`.
struct Quadratic {
    targets: Vec<Vec<f64>>,
}

impl Objective<f64> for Quadratic {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn example(&self, params: &ParamStore<f64>, index: usize, _seed: u64) -> Result<Option<(f64, Grads<f64>)>> {
        let w = params.at(0).data();
        let a = &self.targets[index];
        let g: Vec<f64> = w.iter().zip(a).map(|(x, y)| x - y).collect();
        let loss = 0.5 * g.iter().map(|d| d * d).sum::<f64>();
        Ok(Some((loss, Grads(vec![g]))))
    }
}

fn store(values: &[f64]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::row(values.to_vec())).unwrap();
    p
}

fn toy_objective_data() -> (condseq::model::LasModel<f64>, Vec<Example<f64>>) {
    let mut r = rng(31);
    let cfg = toy_config(6, 3, condseq::model::InjectionMode::Both);
    let m = scaled_model(&cfg, 32, 1.0);
    let examples = (0..24)
        .map(|i| {
            let frames = r.random_range(2..7);
            let len = r.random_range(1..4);
            let mut targets: Vec<usize> = (0..len).map(|_| r.random_range(2..6)).collect();
            targets.push(condseq::bpe::EOS);
            Example {
                id: format!("u{i}"),
                feats: normal_tensor(&[frames, 3], 1.0, &mut r),
                cond: vec![r.random_range(0..4), r.random_range(0..6)],
                targets,
                text: String::new(),
                dialect: 0,
                domain: 0,
            }
        })
        .collect();
    (m, examples)
}

#[test]
fn single_worker_without_block_momentum_is_sequential_sgd() {
    let (m, examples) = toy_objective_data();
    let obj = CeObjective {
        net: &m.net,
        examples: &examples,
        label_smoothing: 0.05,
        sched_sampling: 0.2,
        specaug: SpecAugmentConfig::default(),
    };
    let (lr, clip, seed) = (0.2, 5.0, 9);
    let cfg = BmufConfig {
        workers: 1,
        block_steps: 1,
        momentum: Some(0.0),
        block_lr: 1.0,
        nesterov: false,
    };
    let mut seq = m.params.clone();
    let mut opt = Sgd::new(0.0);
    let mut state = GlobalState::new(&m.params, &cfg).unwrap();
    let mut steps = 0;
    let mut epoch = 0;
    while steps < 200 {
        epoch += 1;
        for batch in make_batches(&epoch_order(examples.len(), seed, epoch), 3) {
            sgd_steps(&obj, &mut seq, &mut opt, std::slice::from_ref(&batch), lr, clip, seed, epoch).unwrap();
            let shards = vec![vec![batch]];
            let res = run_block(&obj, &state.broadcast(), &shards, lr, 0.0, clip, seed, epoch).unwrap();
            let workers: Vec<_> = res.into_iter().map(|r| r.params).collect();
            state = aggregate_block(&state, &workers, &cfg).unwrap();
            steps += 1;
            let d = state.params.max_abs_diff(&seq);
            assert!(d <= 1e-10, "step {steps}: {d:e}");
            if steps == 200 {
                break;
            }
        }
    }
    assert!(seq.max_abs_diff(&m.params) > 1e-3);
}

#[test]
fn single_worker_epoch_matches_sgd_epoch() {
    let (m, examples) = toy_objective_data();
    let obj = CeObjective {
        net: &m.net,
        examples: &examples,
        label_smoothing: 0.05,
        sched_sampling: 0.0,
        specaug: SpecAugmentConfig::off(),
    };
    let tcfg = TrainConfig {
        batch_size: 2,
        momentum: 0.0,
        ..TrainConfig::default()
    };
    let cfg = BmufConfig {
        workers: 1,
        block_steps: 5,
        momentum: Some(0.0),
        block_lr: 1.0,
        nesterov: false,
    };
    let mut state = GlobalState::new(&m.params, &cfg).unwrap();
    let mut seq = m.params.clone();
    for epoch in 1..=3 {
        run_epoch(&obj, &mut state, &cfg, &tcfg, 0.1, epoch).unwrap();
        let batches = make_batches(&epoch_order(examples.len(), tcfg.seed, epoch), tcfg.batch_size);
        sgd_steps(&obj, &mut seq, &mut Sgd::new(0.0), &batches, 0.1, tcfg.grad_clip, tcfg.seed, epoch).unwrap();
    }
    assert!(state.params.max_abs_diff(&seq) <= 1e-10);
}

#[test]
fn two_block_recursion_matches_hand_unrolling() {
    let (eta, zeta) = (0.5, 0.7);
    let cfg = BmufConfig {
        workers: 2,
        block_steps: 1,
        momentum: Some(eta),
        block_lr: zeta,
        nesterov: false,
    };
    let w0 = [1.0, -2.0, 0.5];
    let blk1 = [[1.5, -1.0, 0.0], [0.5, -2.5, 1.5]];
    let blk2 = [[2.0, 0.0, -1.0], [1.0, 1.0, 2.0]];
    let state = GlobalState::new(&store(&w0), &cfg).unwrap();
    let s1 = aggregate_block(&state, &[store(&blk1[0]), store(&blk1[1])], &cfg).unwrap();
    let s2 = aggregate_block(&s1, &[store(&blk2[0]), store(&blk2[1])], &cfg).unwrap();
    for j in 0..3 {
        let mean1 = (blk1[0][j] + blk1[1][j]) / 2.0;
        let d1 = zeta * (mean1 - w0[j]);
        let w1 = w0[j] + d1;
        let mean2 = (blk2[0][j] + blk2[1][j]) / 2.0;
        let d2 = eta * d1 + zeta * (mean2 - w1);
        let w2 = w1 + d2;
        assert!((s1.params.at(0).data()[j] - w1).abs() < 1e-15);
        assert!((s2.params.at(0).data()[j] - w2).abs() < 1e-15);
        assert!((s2.delta.0[0][j] - d2).abs() < 1e-15);
    }
    assert_eq!(s2.block, 2);
    let nesterov = BmufConfig { nesterov: true, ..cfg };
    let mut ns = GlobalState::new(&store(&w0), &nesterov).unwrap();
    ns = aggregate_block(&ns, &[store(&blk1[0]), store(&blk1[1])], &nesterov).unwrap();
    let b = ns.broadcast();
    for j in 0..3 {
        let want = ns.params.at(0).data()[j] + eta * ns.delta.0[0][j];
        assert!((b.at(0).data()[j] - want).abs() < 1e-15);
    }
}

#[test]
fn worker_order_does_not_matter() {
    let mut r = rng(41);
    let cfg = BmufConfig {
        workers: 4,
        momentum: Some(0.6),
        ..BmufConfig::default()
    };
    let w0: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let workers: Vec<ParamStore<f64>> = (0..4)
        .map(|_| store(&(0..6).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect();
    let s = GlobalState::new(&store(&w0), &cfg).unwrap();
    let a = aggregate_block(&s, &workers, &cfg).unwrap();
    let mut rev = workers.clone();
    rev.reverse();
    rev.swap(0, 2);
    let b = aggregate_block(&s, &rev, &cfg).unwrap();
    assert!(a.params.max_abs_diff(&b.params) < 1e-14);
}

#[test]
fn converges_on_a_convex_problem() {
    let mut r = rng(51);
    let targets: Vec<Vec<f64>> = (0..32).map(|_| (0..4).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
    let mean: Vec<f64> = (0..4).map(|j| targets.iter().map(|a| a[j]).sum::<f64>() / 32.0).collect();
    let obj = Quadratic { targets };
    let cfg = BmufConfig {
        workers: 4,
        block_steps: 2,
        ..BmufConfig::default()
    };
    let tcfg = TrainConfig {
        batch_size: 4,
        momentum: 0.0,
        grad_clip: 0.0,
        ..TrainConfig::default()
    };
    let mut state = GlobalState::new(&store(&[10.0, -10.0, 5.0, 0.0]), &cfg).unwrap();
    let mut lr = 0.2;
    for epoch in 1..=200 {
        run_epoch(&obj, &mut state, &cfg, &tcfg, lr, epoch).unwrap();
        lr *= 0.97;
    }
    for (w, m) in state.params.at(0).data().iter().zip(&mean) {
        assert!((w - m).abs() < 1e-3, "{w} vs {m}");
    }
}

#[test]
fn empty_shards_are_logged_and_skipped() {
    let obj = Quadratic {
        targets: vec![vec![1.0], vec![2.0], vec![3.0]],
    };
    let cfg = BmufConfig {
        workers: 5,
        block_steps: 1,
        ..BmufConfig::default()
    };
    let mut state = GlobalState::new(&store(&[0.0]), &cfg).unwrap();
    let r = run_epoch(&obj, &mut state, &cfg, &TrainConfig::default(), 0.1, 1).unwrap();
    assert_eq!(r.log.iter().filter(|l| l.ends_with("empty")).count(), 2);
    assert!(state.params.at(0).data()[0] > 0.0);
}

#[test]
fn layout_mismatch_is_a_contract_error() {
    let cfg = BmufConfig::default();
    let s = GlobalState::new(&store(&[0.0, 1.0]), &cfg).unwrap();
    let r = aggregate_block(&s, &[store(&[0.0])], &cfg);
    assert!(matches!(r, Err(condseq::Error::Contract(_))));
    assert!(BmufConfig { workers: 0, ..cfg.clone() }.validate().is_err());
    assert!((BmufConfig::default().eta() - 0.675).abs() < 1e-15);
}

#[test]
fn shards_partition_the_epoch() {
    for (n, w) in [(10, 3), (7, 7), (3, 5)] {
        let shards = shard_order(n, w, 4, 2);
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
