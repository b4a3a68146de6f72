mod common;

use condseq::autograd::{numeric_gradient, relative_error, Graph, Var, GRAD_CHECK_FLOOR};
use condseq::bpe::EOS;
use condseq::model::{LasModel, ModelConfig};
use condseq::tensor::Tensor;
use condseq::trainer::ce_loss;
use condseq::Result;
use rand::Rng;

use common::*;

const OP_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-4;

type OpFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn reduce(g: &mut Graph<f64>, out: Var, w: &[f64]) -> Var {
    g.weighted_sum(out, w.to_vec()).unwrap()
}

/// Compares the analytic gradient of `Σ w ⊙ op(inputs)` with central
/// differences for every input element.
fn check_op(name: &str, inputs: &[Tensor<f64>], op: &OpFn) {
    let mut r = rng(99);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().with_grad(true))).collect();
    let out = op(&mut g, &vars).unwrap();
    let w: Vec<f64> = (0..g.value(out).len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = reduce(&mut g, out, &w);
    g.backward(loss).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap().to_vec();
        let numeric = numeric_gradient(x, 1e-6, |probe| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == k { probe } else { t }))
                .collect();
            let out = op(&mut g, &vars).unwrap();
            let l = reduce(&mut g, out, &w);
            g.item(l)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            let e = relative_error(*a, *n, GRAD_CHECK_FLOOR);
            assert!(e < OP_TOL, "{name}: input {k} analytic {a} numeric {n} error {e:e}");
        }
    }
}

fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    normal_tensor(shape, 1.0, &mut rng(seed))
}

#[test]
fn elementwise_ops() {
    check_op("add", &[t(&[2, 3], 1), t(&[2, 3], 2)], &|g, v| g.add(v[0], v[1]));
    check_op("sub", &[t(&[2, 3], 1), t(&[2, 3], 2)], &|g, v| g.sub(v[0], v[1]));
    check_op("mul", &[t(&[2, 3], 1), t(&[2, 3], 2)], &|g, v| g.mul(v[0], v[1]));
    check_op("scale", &[t(&[3, 2], 3)], &|g, v| Ok(g.scale(v[0], -1.7)));
    check_op("sigmoid", &[t(&[2, 4], 4)], &|g, v| Ok(g.sigmoid(v[0])));
    check_op("tanh", &[t(&[2, 4], 5)], &|g, v| Ok(g.tanh(v[0])));
    check_op("add_bias", &[t(&[3, 4], 6), t(&[4], 7)], &|g, v| g.add_bias(v[0], v[1]));
}

#[test]
fn matmul_and_reductions() {
    check_op("matmul", &[t(&[2, 3], 8), t(&[3, 4], 9)], &|g, v| g.matmul(v[0], v[1]));
    check_op("matmul_vec", &[t(&[1, 5], 10), t(&[5, 2], 11)], &|g, v| g.matmul(v[0], v[1]));
    check_op("sum", &[t(&[3, 3], 12)], &|g, v| Ok(g.sum(v[0])));
    check_op("weighted_sum", &[t(&[2, 3], 13)], &|g, v| {
        g.weighted_sum(v[0], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25])
    });
}

#[test]
fn softmax_family() {
    for axis in [0, 1] {
        check_op("softmax", &[t(&[3, 4], 14)], &move |g, v| g.softmax(v[0], axis));
        check_op("log_softmax", &[t(&[3, 4], 15)], &move |g, v| g.log_softmax(v[0], axis));
    }
    check_op("softmax_rank1", &[t(&[5], 16)], &|g, v| g.softmax(v[0], 0));
}

#[test]
fn structural_ops() {
    check_op("concat0", &[t(&[2, 3], 17), t(&[1, 3], 18)], &|g, v| g.concat(&[v[0], v[1]], 0));
    check_op("concat1", &[t(&[2, 3], 19), t(&[2, 2], 20)], &|g, v| g.concat(&[v[0], v[1]], 1));
    check_op("concat_repeat", &[t(&[1, 2], 21)], &|g, v| g.concat(&[v[0], v[0]], 1));
    check_op("slice", &[t(&[3, 5], 22)], &|g, v| g.slice(v[0], 1, 1, 3));
    check_op("row", &[t(&[4, 2], 23)], &|g, v| g.row(v[0], 2));
    check_op("stack_rows", &[t(&[1, 3], 24), t(&[1, 3], 25)], &|g, v| g.stack_rows(&[v[1], v[0], v[1]]));
    check_op("reshape", &[t(&[2, 6], 26)], &|g, v| g.reshape(v[0], &[3, 4]));
    check_op("broadcast_rows", &[t(&[1, 3], 27)], &|g, v| g.broadcast_rows(v[0], 4));
}

#[test]
fn lstm_gates_op() {
    check_op("lstm_gates", &[t(&[2, 12], 28), t(&[2, 3], 29)], &|g, v| g.lstm_gates(v[0], v[1]));
}

#[test]
fn composed_expression() {
    // shared subexpressions accumulate gradient from several consumers
    check_op("composed", &[t(&[2, 3], 30), t(&[3, 3], 31)], &|g, v| {
        let a = g.matmul(v[0], v[1])?;
        let b = g.tanh(a);
        let c = g.mul(b, a)?;
        let d = g.add(c, v[0])?;
        g.softmax(d, 1)
    });
}

fn model_loss(cfg: &ModelConfig, params: &condseq::params::ParamStore<f64>, feats: &Tensor<f64>, cond: &[usize], targets: &[usize]) -> f64 {
    let m = LasModel::from_params(cfg, params.clone()).unwrap();
    ce_of(&m, feats, cond, targets, 0.05)
}

#[test]
fn full_model_gradient_all_injection_modes() {
    for (i, mode) in MODES.into_iter().enumerate() {
        let cfg = ModelConfig::desk(7, 5).with_inject(mode);
        let mut m = scaled_model(&cfg, 40 + i as u64, 1.0);
        if mode.encoder() || mode.decoder() {
            randomize_conditioning(&mut m, 50 + i as u64);
        }
        let mut r = rng(60 + i as u64);
        let frames = 5 + i % 2;
        let feats = normal_tensor(&[frames, 5], 1.0, &mut r);
        let cond = [r.random_range(0..4), r.random_range(0..6)];
        let targets = [r.random_range(3..7), r.random_range(2..7), EOS];

        let mut g = Graph::new();
        let b = m.net.bind(&mut g, &m.params, true);
        let prep = m.net.prepare(&mut g, &b, &feats, &cond).unwrap();
        let logits = m.net.teacher_forced(&mut g, &b, &prep, &targets).unwrap();
        let loss = ce_loss(&mut g, &logits, &targets, 0.05).unwrap();
        g.backward(loss).unwrap();

        let mut worst: f64 = 0.0;
        for (k, name) in m.params.names().iter().enumerate() {
            let analytic = g.grad(b[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; m.params.at(k).numel()]);
            let n = analytic.len();
            let picks: Vec<usize> = if n <= 12 { (0..n).collect() } else { (0..12).map(|_| r.random_range(0..n)).collect() };
            for j in picks {
                let step = 1e-5;
                let mut p = m.params.clone();
                p.at_mut(k).data_mut()[j] += step;
                let up = model_loss(&cfg, &p, &feats, &cond, &targets);
                p.at_mut(k).data_mut()[j] -= 2.0 * step;
                let down = model_loss(&cfg, &p, &feats, &cond, &targets);
                let numeric = (up - down) / (2.0 * step);
                let e = relative_error(analytic[j], numeric, GRAD_CHECK_FLOOR);
                assert!(e < MODEL_TOL, "{}: {name}[{j}] analytic {} numeric {numeric} error {e:e}", mode.name(), analytic[j]);
                worst = worst.max(e);
            }
        }
        assert!(worst.is_finite());
    }
}

#[test]
fn second_backward_without_reset_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&t(&[2], 70).with_grad(true));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(condseq::Error::Contract(_))));
    g.reset_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}
