//! Cross-entropy training with label smoothing, scheduled sampling and
//! SpecAugment; plateau learning-rate decay; MWER fine-tuning.
//!
//! Each utterance gets its own graph, and a batch gradient is the mean of
//! the per-utterance gradients, so no padding or masking is involved.
//! Randomness for one utterance is seeded from `(seed, epoch, index)`, which
//! makes a step independent of execution order.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;

use crate::autograd::{Graph, Var};
use crate::bmuf::{self, BmufConfig};
use crate::bpe::{BpeModel, EOS};
use crate::checkpoint;
use crate::corpus::Utterance;
use crate::decode::{beam_search_with, BeamConfig};
use crate::error::{Error, Result};
use crate::eval::{edit_distance, ErrorCount};
use crate::model::{frames_tensor, LasModel, LasNet, Prepared};
use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One prepared training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub id: String,
    pub feats: Tensor<T>,
    /// Category ids, one per conditioning feature.
    pub cond: Vec<usize>,
    /// Output token ids ending in `<eos>`.
    pub targets: Vec<usize>,
    pub text: String,
    pub dialect: usize,
    pub domain: usize,
}

impl<T: Scalar> Example<T> {
    pub fn from_utterance(u: &Utterance, bpe: &BpeModel) -> Result<Self> {
        let text = u.text();
        let mut targets = bpe.encode(&text);
        if targets.is_empty() {
            return Err(Error::Input(format!("utterance `{}` has no tokens", u.id)));
        }
        targets.push(EOS);
        Ok(Example {
            id: u.id.clone(),
            feats: frames_tensor(&u.features, u.num_frames, u.d_feat)?,
            cond: vec![u.dialect, u.domain],
            targets,
            text,
            dialect: u.dialect,
            domain: u.domain,
        })
    }
}

pub fn make_examples<T: Scalar>(utts: &[Utterance], bpe: &BpeModel) -> Result<Vec<Example<T>>> {
    utts.iter().map(|u| Example::from_utterance(u, bpe)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    /// Largest time band as a fraction of the utterance length.
    pub max_time_frac: f64,
    pub freq_masks: usize,
    /// Largest feature band as a fraction of the feature dimension.
    pub max_freq_frac: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            time_masks: 1,
            max_time_frac: 0.1,
            freq_masks: 1,
            max_freq_frac: 0.25,
        }
    }
}

impl SpecAugmentConfig {
    pub fn off() -> Self {
        SpecAugmentConfig {
            time_masks: 0,
            max_time_frac: 0.0,
            freq_masks: 0,
            max_freq_frac: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MwerConfig {
    pub epochs: usize,
    pub nbest: usize,
    /// Weight λ of the cross-entropy term.
    pub ce_weight: f64,
    pub lr: f64,
    pub len_penalty: f64,
}

impl Default for MwerConfig {
    fn default() -> Self {
        MwerConfig {
            epochs: 1,
            nbest: 4,
            ce_weight: 0.05,
            lr: 0.01,
            len_penalty: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    /// Momentum of the local SGD optimizer.
    pub momentum: f64,
    pub label_smoothing: f64,
    pub sched_sampling: f64,
    /// Global gradient-norm threshold; `0` disables clipping.
    pub grad_clip: f64,
    pub specaug: SpecAugmentConfig,
    pub mwer: MwerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Greedy dev CER in the metrics log each epoch.
    pub log_dev_cer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.025,
            lr_decay: 0.8,
            min_lr: 1e-4,
            momentum: 0.0,
            label_smoothing: 0.05,
            sched_sampling: 0.1,
            grad_clip: 5.0,
            specaug: SpecAugmentConfig::default(),
            mwer: MwerConfig::default(),
            epochs: 10,
            batch_size: 8,
            seed: 1,
            log_dev_cer: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.sched_sampling) {
            return bad("sched_sampling must be in [0, 1]");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must be in (0, 1)");
        }
        if self.lr < 0.0 || self.mwer.lr < 0.0 || self.grad_clip < 0.0 || self.mwer.ce_weight < 0.0 {
            return bad("learning rates, grad_clip and ce_weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.specaug.max_time_frac > 1.0 || self.specaug.max_freq_frac > 1.0 {
            return bad("SpecAugment widths cannot exceed the input dimensions");
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy averaged over steps: the target gets
/// `1 − ε` plus an `ε / V` share of uniform mass.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, logits: &[Var], targets: &[usize], eps: f64) -> Result<Var> {
    if logits.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Input("empty target sequence".into()));
    }
    let stacked = g.stack_rows(logits)?;
    let v = g.shape(stacked)[1];
    let logp = g.log_softmax(stacked, 1)?;
    let u = targets.len() as f64;
    let off = T::lit(-eps / v as f64 / u);
    let on = T::lit(-((1.0 - eps) + eps / v as f64) / u);
    let mut w = vec![off; targets.len() * v];
    for (i, &y) in targets.iter().enumerate() {
        if y >= v {
            return Err(Error::Input(format!("target id {y} out of range for {v} outputs")));
        }
        w[i * v + y] = on;
    }
    g.weighted_sum(logp, w)
}

fn sample_from_logits<T: Scalar>(logits: &[T], rng: &mut impl Rng) -> usize {
    let m = logits.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|x| (x.to_f64_lossy() - m).exp()).collect();
    WeightedIndex::new(&w).map_or(0, |d| d.sample(rng))
}

/// Decoder logits where each step after the first is fed, with probability
/// `p`, a token sampled from the previous step's prediction instead of the
/// reference. Also returns which steps were fed a prediction.
pub fn forward_teacher_or_sampled<T: Scalar>(
    net: &LasNet,
    g: &mut Graph<T>,
    b: &[Var],
    prep: &Prepared,
    targets: &[usize],
    p: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Var>, Vec<bool>)> {
    let mut fed = vec![false; targets.len()];
    let logits = net.unroll(g, b, prep, targets.len(), |i, prev_logits| {
        if p > 0.0 && rng.random::<f64>() < p {
            fed[i] = true;
            sample_from_logits(prev_logits, rng)
        } else {
            targets[i - 1]
        }
    })?;
    Ok((logits, fed))
}

/// A contiguous masked band along one axis (0 = time, 1 = features).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub axis: usize,
    pub start: usize,
    pub width: usize,
}

pub fn sample_bands(frames: usize, dims: usize, cfg: &SpecAugmentConfig, rng: &mut impl Rng) -> Vec<Band> {
    let mut out = Vec::new();
    for (axis, n, count, frac) in [
        (0, frames, cfg.time_masks, cfg.max_time_frac),
        (1, dims, cfg.freq_masks, cfg.max_freq_frac),
    ] {
        let max_w = ((frac * n as f64).floor() as usize).min(n);
        for _ in 0..count {
            let width = rng.random_range(0..=max_w);
            let start = rng.random_range(0..=n - width);
            out.push(Band { axis, start, width });
        }
    }
    out
}

/// Zeroes the given bands of `x` (`[L × d]`).
pub fn apply_bands<T: Scalar>(x: &Tensor<T>, bands: &[Band]) -> Tensor<T> {
    let mut y = x.clone();
    let (rows, cols) = (x.rows(), x.cols());
    let data = y.data_mut();
    for b in bands {
        for r in 0..rows {
            for c in 0..cols {
                let pos = if b.axis == 0 { r } else { c };
                if (b.start..b.start + b.width).contains(&pos) {
                    data[r * cols + c] = T::zero();
                }
            }
        }
    }
    y
}

pub fn spec_augment<T: Scalar>(x: &Tensor<T>, cfg: &SpecAugmentConfig, rng: &mut impl Rng) -> (Tensor<T>, Vec<Band>) {
    let bands = sample_bands(x.rows(), x.cols(), cfg, rng);
    (apply_bands(x, &bands), bands)
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads.norm().to_f64_lossy();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

/// Per-example loss and gradient; `None` marks a skipped example.
pub trait Objective<T: Scalar>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn example(&self, params: &ParamStore<T>, index: usize, seed: u64) -> Result<Option<(T, Grads<T>)>>;
}

/// Seed for one example in one epoch.
pub fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut x = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seeded shuffle of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(seed, epoch, usize::MAX));
    order.shuffle(&mut rng);
    order
}

pub struct BatchResult<T> {
    pub loss: T,
    pub grads: Grads<T>,
    pub used: usize,
    pub skipped: usize,
}

/// Mean loss and gradient over `batch`. Examples are evaluated in parallel
/// and reduced in batch order.
pub fn batch_gradient<T: Scalar>(
    obj: &dyn Objective<T>,
    params: &ParamStore<T>,
    batch: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<BatchResult<T>> {
    let results: Vec<Result<Option<(T, Grads<T>)>>> = batch
        .par_iter()
        .map(|&i| obj.example(params, i, example_seed(seed, epoch, i)))
        .collect();
    let mut grads = Grads::zeros_like(params);
    let mut loss = T::zero();
    let (mut used, mut skipped) = (0, 0);
    for r in results {
        match r? {
            Some((l, g)) => {
                loss += l;
                grads.add_scaled(&g, T::one());
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used > 0 {
        let inv = T::one() / T::lit(used as f64);
        grads.scale(inv);
        loss *= inv;
    }
    Ok(BatchResult {
        loss,
        grads,
        used,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Option<Grads<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: None,
        }
    }

    /// `v ← μ·v + g; θ ← θ − lr·v`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: Grads<T>, lr: f64) {
        let v = match self.velocity.take() {
            Some(mut v) if self.momentum > 0.0 => {
                v.scale(T::lit(self.momentum));
                v.add_scaled(&grads, T::one());
                v
            }
            _ => grads,
        };
        params.add_scaled(&v, T::lit(-lr));
        if self.momentum > 0.0 {
            self.velocity = Some(v);
        }
    }
}

/// Runs clipped SGD over `batches`; returns the mean batch loss.
pub fn sgd_steps<T: Scalar>(
    obj: &dyn Objective<T>,
    params: &mut ParamStore<T>,
    opt: &mut Sgd<T>,
    batches: &[Vec<usize>],
    lr: f64,
    clip: f64,
    seed: u64,
    epoch: usize,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut skipped = 0;
    for batch in batches {
        let mut r = batch_gradient(obj, params, batch, seed, epoch)?;
        skipped += r.skipped;
        if r.used == 0 {
            continue;
        }
        total += r.loss.to_f64_lossy();
        clip_grad_norm(&mut r.grads, clip);
        opt.step(params, r.grads, lr);
    }
    Ok((total / batches.len().max(1) as f64, skipped))
}

pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Smoothed cross-entropy objective with augmentation and scheduled sampling.
pub struct CeObjective<'a, T> {
    pub net: &'a LasNet,
    pub examples: &'a [Example<T>],
    pub label_smoothing: f64,
    pub sched_sampling: f64,
    pub specaug: SpecAugmentConfig,
}

fn collect_grads<T: Scalar>(g: &Graph<T>, bound: &[Var], params: &ParamStore<T>) -> Grads<T> {
    Grads(
        bound
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![T::zero(); t.numel()], <[T]>::to_vec))
            .collect(),
    )
}

impl<T: Scalar> Objective<T> for CeObjective<'_, T> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn example(&self, params: &ParamStore<T>, index: usize, seed: u64) -> Result<Option<(T, Grads<T>)>> {
        let ex = &self.examples[index];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = if self.specaug.time_masks + self.specaug.freq_masks > 0 {
            spec_augment(&ex.feats, &self.specaug, &mut rng).0
        } else {
            ex.feats.clone()
        };
        let mut g = Graph::new();
        let b = self.net.bind(&mut g, params, true);
        let prep = self.net.prepare(&mut g, &b, &feats, &ex.cond)?;
        let (logits, _) =
            forward_teacher_or_sampled(self.net, &mut g, &b, &prep, &ex.targets, self.sched_sampling, &mut rng)?;
        let loss = ce_loss(&mut g, &logits, &ex.targets, self.label_smoothing)?;
        g.backward(loss)?;
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on `{}`", ex.id)));
        }
        Ok(Some((value, collect_grads(&g, &b, params))))
    }
}

/// Mean teacher-forced smoothed cross-entropy, no augmentation.
pub fn eval_loss<T: Scalar>(net: &LasNet, params: &ParamStore<T>, examples: &[Example<T>], eps: f64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let losses: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new();
            let b = net.bind(&mut g, params, false);
            let prep = net.prepare(&mut g, &b, &ex.feats, &ex.cond)?;
            let logits = net.teacher_forced(&mut g, &b, &prep, &ex.targets)?;
            let loss = ce_loss(&mut g, &logits, &ex.targets, eps)?;
            Ok(g.item(loss).to_f64_lossy())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / examples.len() as f64)
}

/// Corpus CER of beam-search output against the reference texts.
pub fn decode_cer<T: Scalar>(
    net: &LasNet,
    params: &ParamStore<T>,
    examples: &[Example<T>],
    bpe: &BpeModel,
    beam: &BeamConfig,
) -> Result<ErrorCount> {
    let hyps: Vec<Result<String>> = examples
        .par_iter()
        .map(|ex| {
            let best = beam_search_with(net, params, &ex.feats, &ex.cond, beam)?;
            let ids = best.first().map(|h| h.content().to_vec()).unwrap_or_default();
            bpe.decode(&ids)
        })
        .collect();
    let mut count = ErrorCount::default();
    for (ex, h) in examples.iter().zip(hyps) {
        count.add(&ex.text, &h?);
    }
    Ok(count)
}

/// Learning rate decayed on validation plateaus.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub decay: f64,
    pub min_lr: f64,
    pub best: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64, decay: f64, min_lr: f64, baseline: f64) -> Self {
        PlateauSchedule {
            lr,
            decay,
            min_lr,
            best: baseline,
        }
    }

    /// Records a validation loss; on non-improvement the rate decays.
    /// Returns whether the loss improved on the best so far.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            true
        } else {
            self.lr *= self.decay;
            false
        }
    }

    pub fn exhausted(&self) -> bool {
        self.lr < self.min_lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Bmuf(BmufConfig),
}

/// Where per-epoch checkpoints go, if anywhere.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub lr: f64,
    pub best_loss: f64,
    pub best: ParamStore<T>,
    /// `epoch \t split \t loss \t cer \t lr` lines.
    pub metrics: Vec<String>,
    /// BMUF block lines, empty for plain SGD.
    pub block_log: Vec<String>,
    pub skipped: usize,
}

fn format_metric(epoch: usize, split: &str, loss: f64, cer: Option<f64>, lr: f64) -> String {
    let cer = cer.map_or_else(|| "-".to_string(), |c| format!("{c:.6}"));
    format!("{epoch}\t{split}\t{loss:.6}\t{cer}\t{lr:.6e}")
}

/// Epoch loop: shuffle, batch, step, validate; on a validation plateau the
/// learning rate decays and the best parameters are restored. The model ends
/// holding the best parameters seen.
pub fn train_epochs<T: Scalar>(
    model: &mut LasModel<T>,
    train: &[Example<T>],
    dev: &[Example<T>],
    cfg: &TrainConfig,
    optimizer: &Optimizer,
    bpe: &BpeModel,
    out: &TrainOutput,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Input("training and validation splits must be non-empty".into()));
    }
    let eps = cfg.label_smoothing;
    let greedy = BeamConfig {
        beam: 1,
        len_penalty: 0.0,
        max_len: None,
    };
    let baseline = eval_loss(&model.net, &model.params, dev, eps)?;
    let mut sched = PlateauSchedule::new(cfg.lr, cfg.lr_decay, cfg.min_lr, baseline);
    let mut state = TrainState {
        epoch: 0,
        lr: cfg.lr,
        best_loss: baseline,
        best: model.params.clone(),
        metrics: vec![format_metric(0, "dev", baseline, None, cfg.lr)],
        block_log: Vec::new(),
        skipped: 0,
    };
    let mut gstate = match optimizer {
        Optimizer::Bmuf(b) => Some(bmuf::GlobalState::new(&model.params, b)?),
        Optimizer::Sgd => None,
    };
    for epoch in 1..=cfg.epochs {
        if sched.exhausted() {
            break;
        }
        let obj = CeObjective {
            net: &model.net,
            examples: train,
            label_smoothing: eps,
            sched_sampling: cfg.sched_sampling,
            specaug: cfg.specaug,
        };
        let lr = sched.lr;
        let train_loss = match (optimizer, gstate.as_mut()) {
            (Optimizer::Bmuf(b), Some(gs)) => {
                let r = bmuf::run_epoch(&obj, gs, b, cfg, lr, epoch)?;
                state.block_log.extend(r.log);
                model.params = gs.params.clone();
                r.loss
            }
            _ => {
                let order = epoch_order(train.len(), cfg.seed, epoch);
                let batches = make_batches(&order, cfg.batch_size);
                let mut opt = Sgd::new(cfg.momentum);
                let (l, skipped) =
                    sgd_steps(&obj, &mut model.params, &mut opt, &batches, lr, cfg.grad_clip, cfg.seed, epoch)?;
                state.skipped += skipped;
                l
            }
        };
        let dev_loss = eval_loss(&model.net, &model.params, dev, eps)?;
        let dev_cer = if cfg.log_dev_cer {
            Some(decode_cer(&model.net, &model.params, dev, bpe, &greedy)?.rate())
        } else {
            None
        };
        state.metrics.push(format_metric(epoch, "train", train_loss, None, lr));
        state.metrics.push(format_metric(epoch, "dev", dev_loss, dev_cer, lr));
        if let Some(gs) = gstate.as_ref() {
            state.block_log.push(format!("{}\t{dev_loss:.6}", gs.block));
        }
        if sched.observe(dev_loss) {
            state.best = model.params.clone();
            state.best_loss = dev_loss;
        } else {
            model.params = state.best.clone();
            if let Some(gs) = gstate.as_mut() {
                gs.reset_to(&state.best);
            }
        }
        state.epoch = epoch;
        state.lr = sched.lr;
        if let Some(dir) = &out.dir {
            checkpoint::save(model, &dir.join(format!("epoch-{epoch}.ckpt")))?;
        }
    }
    model.params = state.best.clone();
    if let Some(dir) = &out.dir {
        checkpoint::save(model, &dir.join("best.ckpt"))?;
    }
    Ok(state)
}

/// Warm-started training on the examples of one dialect, optionally
/// restricted to one domain.
pub fn finetune<T: Scalar>(
    model: &mut LasModel<T>,
    train: &[Example<T>],
    dev: &[Example<T>],
    dialect: usize,
    domain: Option<usize>,
    cfg: &TrainConfig,
    bpe: &BpeModel,
) -> Result<TrainState<T>> {
    let keep = |e: &&Example<T>| e.dialect == dialect && domain.is_none_or(|d| e.domain == d);
    let tr: Vec<Example<T>> = train.iter().filter(keep).cloned().collect();
    let dv: Vec<Example<T>> = dev.iter().filter(keep).cloned().collect();
    if tr.is_empty() || dv.is_empty() {
        return Err(Error::Input(format!(
            "no fine-tuning data for dialect {dialect}{}",
            domain.map_or(String::new(), |d| format!(", domain {d}"))
        )));
    }
    train_epochs(model, &tr, &dv, cfg, &Optimizer::Sgd, bpe, &TrainOutput::default())
}

/// Token edit distance between a hypothesis and the reference, both
/// without `<eos>`.
fn token_errors(hyp: &[usize], targets: &[usize]) -> f64 {
    let r = targets.strip_suffix(&[EOS]).unwrap_or(targets);
    edit_distance(hyp, r) as f64
}

/// Expected-risk objective over the renormalized n-best, interpolated with
/// cross-entropy.
pub struct MwerObjective<'a, T> {
    pub net: &'a LasNet,
    pub examples: &'a [Example<T>],
    pub nbest: usize,
    pub ce_weight: f64,
    pub label_smoothing: f64,
    pub len_penalty: f64,
}

impl<T: Scalar> MwerObjective<'_, T> {
    fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam: self.nbest,
            len_penalty: self.len_penalty,
            max_len: None,
        }
    }

    /// Builds the loss for one example from an explicit n-best list.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        b: &[Var],
        ex: &Example<T>,
        nbest: &[Vec<usize>],
    ) -> Result<Var> {
        let prep = self.net.prepare(g, b, &ex.feats, &ex.cond)?;
        let logps = nbest
            .iter()
            .map(|h| self.net.sequence_log_prob(g, b, &prep, h))
            .collect::<Result<Vec<_>>>()?;
        let row = g.concat(&logps, 0)?;
        let row = g.reshape(row, &[1, nbest.len()])?;
        let post = g.softmax(row, 1)?;
        let errs: Vec<f64> = nbest
            .iter()
            .map(|h| token_errors(h.strip_suffix(&[EOS]).unwrap_or(h), &ex.targets))
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let risk = g.weighted_sum(post, errs.iter().map(|e| T::lit(e - mean)).collect())?;
        if self.ce_weight > 0.0 {
            let logits = self.net.teacher_forced(g, b, &prep, &ex.targets)?;
            let ce = ce_loss(g, &logits, &ex.targets, self.label_smoothing)?;
            let ce = g.scale(ce, T::lit(self.ce_weight));
            g.add(risk, ce)
        } else {
            Ok(risk)
        }
    }

    fn finished_nbest(&self, params: &ParamStore<T>, ex: &Example<T>) -> Result<Vec<Vec<usize>>> {
        Ok(beam_search_with(self.net, params, &ex.feats, &ex.cond, &self.beam())?
            .into_iter()
            .filter(|h| h.finished)
            .map(|h| h.tokens)
            .collect())
    }

    /// Expected token errors `Σ p̂(h)·W(h)` under the current n-best.
    pub fn expected_errors(&self, params: &ParamStore<T>, ex: &Example<T>) -> Result<Option<f64>> {
        let nbest = self.finished_nbest(params, ex)?;
        if nbest.is_empty() {
            return Ok(None);
        }
        let mut g = Graph::new();
        let b = self.net.bind(&mut g, params, false);
        let prep = self.net.prepare(&mut g, &b, &ex.feats, &ex.cond)?;
        let mut lps = Vec::with_capacity(nbest.len());
        for h in &nbest {
            let v = self.net.sequence_log_prob(&mut g, &b, &prep, h)?;
            lps.push(g.item(v).to_f64_lossy());
        }
        let m = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lps.iter().map(|l| (l - m).exp()).sum();
        Ok(Some(
            nbest
                .iter()
                .zip(&lps)
                .map(|(h, l)| (l - m).exp() / z * token_errors(h.strip_suffix(&[EOS]).unwrap_or(h), &ex.targets))
                .sum(),
        ))
    }
}

impl<T: Scalar> Objective<T> for MwerObjective<'_, T> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn example(&self, params: &ParamStore<T>, index: usize, _seed: u64) -> Result<Option<(T, Grads<T>)>> {
        let ex = &self.examples[index];
        let nbest = self.finished_nbest(params, ex)?;
        if nbest.is_empty() {
            return Ok(None);
        }
        let mut g = Graph::new();
        let b = self.net.bind(&mut g, params, true);
        let loss = self.loss_graph(&mut g, &b, ex, &nbest)?;
        g.backward(loss)?;
        Ok(Some((g.item(loss), collect_grads(&g, &b, params))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MwerReport {
    pub steps: usize,
    pub skipped: usize,
    pub mean_loss: f64,
}

/// MWER epochs of clipped SGD at the MWER learning rate.
pub fn mwer_finetune<T: Scalar>(model: &mut LasModel<T>, train: &[Example<T>], cfg: &TrainConfig) -> Result<MwerReport> {
    cfg.validate()?;
    if cfg.mwer.nbest < 2 {
        return Err(Error::Config("MWER needs an n-best of at least 2".into()));
    }
    if train.is_empty() {
        return Err(Error::Input("MWER training split is empty".into()));
    }
    let net = model.net.clone();
    let obj = MwerObjective {
        net: &net,
        examples: train,
        nbest: cfg.mwer.nbest,
        ce_weight: cfg.mwer.ce_weight,
        label_smoothing: cfg.label_smoothing,
        len_penalty: cfg.mwer.len_penalty,
    };
    let mut report = MwerReport {
        steps: 0,
        skipped: 0,
        mean_loss: 0.0,
    };
    let mut total = 0.0;
    for epoch in 1..=cfg.mwer.epochs {
        let order = epoch_order(train.len(), cfg.seed ^ 0x4D57_4552, epoch);
        let batches = make_batches(&order, cfg.batch_size);
        let mut opt = Sgd::new(0.0);
        let (l, skipped) = sgd_steps(&obj, &mut model.params, &mut opt, &batches, cfg.mwer.lr, cfg.grad_clip, cfg.seed, epoch)?;
        total += l;
        report.steps += batches.len();
        report.skipped += skipped;
    }
    report.mean_loss = total / cfg.mwer.epochs.max(1) as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_v() {
        let mut g = Graph::<f64>::new();
        let l: Vec<Var> = (0..3).map(|_| g.constant(&Tensor::zeros(&[1, 4]))).collect();
        for eps in [0.0, 0.05, 0.5] {
            let loss = ce_loss(&mut g, &l, &[0, 3, 1], eps).unwrap();
            assert!((g.item(loss) - 4f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(ce_loss(&mut g, &l, &[0], 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn clip_examples() {
        let mut g = Grads(vec![vec![1.0f64; 100]]);
        let before = clip_grad_norm(&mut g, 5.0);
        assert_eq!(before, 10.0);
        assert!((g.norm() - 5.0).abs() < 1e-12);
        let mut z = Grads(vec![vec![0.0f64; 4]]);
        clip_grad_norm(&mut z, 1.0);
        assert_eq!(z.0[0], vec![0.0; 4]);
        let mut small = Grads(vec![vec![0.1f64, 0.2]]);
        clip_grad_norm(&mut small, 5.0);
        assert_eq!(small.0[0], vec![0.1, 0.2]);
    }

    #[test]
    fn plateau_decays_twice() {
        let mut s = PlateauSchedule::new(0.025, 0.8, 1e-6, 1.0);
        assert!(!s.observe(1.0));
        assert!(!s.observe(1.5));
        assert!((s.lr - 0.016).abs() < 1e-15);
        assert!(s.observe(0.5));
        assert!((s.lr - 0.016).abs() < 1e-15);
    }

    #[test]
    fn full_time_band_zeroes_everything() {
        let x = Tensor::from_fn(&[5, 3], |i| i as f64 + 1.0);
        let y = apply_bands(&x, &[Band { axis: 0, start: 0, width: 5 }]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (z, bands) = spec_augment(&x, &SpecAugmentConfig::off(), &mut rng);
        assert!(bands.is_empty());
        assert_eq!(z, x);
    }

    #[test]
    fn example_seeds_differ() {
        assert_ne!(example_seed(1, 1, 0), example_seed(1, 1, 1));
        assert_ne!(example_seed(1, 1, 0), example_seed(1, 2, 0));
        assert_eq!(epoch_order(10, 3, 1), epoch_order(10, 3, 1));
    }
}
