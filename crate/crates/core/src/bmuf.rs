//! Simulated blockwise model-update filtering (block-momentum SGD).
//!
//! Per block every worker copies the global parameters and runs local SGD
//! on its own shard. The coordinator then averages the workers and applies
//! ```text
//! G(t) = W̄ − W(t−1)
//! Δ(t) = η·Δ(t−1) + ζ·G(t)
//! W(t) = W(t−1) + Δ(t)
//! ```
//! With Nesterov-style updates the next block starts from `W(t) + η·Δ(t)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;
use crate::trainer::{epoch_order, make_batches, sgd_steps, Objective, Sgd, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BmufConfig {
    pub workers: usize,
    /// Local steps between synchronizations.
    pub block_steps: usize,
    /// Block momentum η; `None` uses `0.9·(1 − 1/W)`.
    pub momentum: Option<f64>,
    /// Block learning rate ζ.
    pub block_lr: f64,
    pub nesterov: bool,
}

impl Default for BmufConfig {
    fn default() -> Self {
        BmufConfig {
            workers: 4,
            block_steps: 8,
            momentum: None,
            block_lr: 1.0,
            nesterov: false,
        }
    }
}

impl BmufConfig {
    pub fn eta(&self) -> f64 {
        self.momentum
            .unwrap_or(0.9 * (1.0 - 1.0 / self.workers.max(1) as f64))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.block_steps == 0 {
            return Err(Error::Config("BMUF needs at least one worker and one step per block".into()));
        }
        if !(0.0..1.0).contains(&self.eta()) {
            return Err(Error::Config("block momentum must be in [0, 1)".into()));
        }
        if self.block_lr <= 0.0 {
            return Err(Error::Config("block learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState<T> {
    pub params: ParamStore<T>,
    pub delta: Grads<T>,
    pub block: usize,
    eta: f64,
    nesterov: bool,
}

impl<T: Scalar> GlobalState<T> {
    pub fn new(params: &ParamStore<T>, cfg: &BmufConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(GlobalState {
            params: params.clone(),
            delta: Grads::zeros_like(params),
            block: 0,
            eta: cfg.eta(),
            nesterov: cfg.nesterov,
        })
    }

    /// Parameters handed to workers for the next block.
    pub fn broadcast(&self) -> ParamStore<T> {
        let mut p = self.params.clone();
        if self.nesterov {
            p.add_scaled(&self.delta, T::lit(self.eta));
        }
        p
    }

    /// Replaces the global parameters and clears the update memory.
    pub fn reset_to(&mut self, params: &ParamStore<T>) {
        self.params = params.clone();
        self.delta = Grads::zeros_like(params);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerResult<T> {
    pub params: ParamStore<T>,
    /// Mean local batch loss; `None` when the shard was empty.
    pub loss: Option<f64>,
}

/// Local SGD for every worker from the same starting point. `shards[w]`
/// holds worker `w`'s batches for this block.
#[allow(clippy::too_many_arguments)]
pub fn run_block<T: Scalar>(
    obj: &dyn Objective<T>,
    start: &ParamStore<T>,
    shards: &[Vec<Vec<usize>>],
    lr: f64,
    local_momentum: f64,
    clip: f64,
    seed: u64,
    epoch: usize,
) -> Result<Vec<WorkerResult<T>>> {
    if shards.is_empty() {
        return Err(Error::Input("BMUF block needs at least one worker".into()));
    }
    shards
        .par_iter()
        .map(|batches| {
            let mut params = start.clone();
            if batches.is_empty() {
                return Ok(WorkerResult { params, loss: None });
            }
            let mut opt = Sgd::new(local_momentum);
            let (loss, _) = sgd_steps(obj, &mut params, &mut opt, batches, lr, clip, seed, epoch)?;
            Ok(WorkerResult {
                params,
                loss: Some(loss),
            })
        })
        .collect()
}

/// Averages worker parameters and applies the filtered block update.
pub fn aggregate_block<T: Scalar>(state: &GlobalState<T>, workers: &[ParamStore<T>], cfg: &BmufConfig) -> Result<GlobalState<T>> {
    if workers.is_empty() {
        return Err(Error::Contract("no worker parameters to aggregate".into()));
    }
    if workers.iter().any(|w| !w.same_layout(&state.params)) {
        return Err(Error::Contract("worker parameters do not match the global layout".into()));
    }
    let eta = T::lit(state.eta);
    let zeta = T::lit(cfg.block_lr);
    let inv_w = T::one() / T::lit(workers.len() as f64);
    let mut next = state.clone();
    for (i, t) in state.params.tensors().iter().enumerate() {
        let delta = &mut next.delta.0[i];
        let out = next.params.at_mut(i).data_mut();
        for (j, &w_prev) in t.data().iter().enumerate() {
            let mean = workers.iter().map(|w| w.at(i).data()[j]).sum::<T>() * inv_w;
            let g = mean - w_prev;
            delta[j] = eta * delta[j] + zeta * g;
            out[j] = w_prev + delta[j];
        }
    }
    next.block += 1;
    Ok(next)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochResult {
    pub loss: f64,
    /// `block \t worker \t local_loss` lines.
    pub log: Vec<String>,
}

/// Round-robin shards of a seeded permutation.
pub fn shard_order(n: usize, workers: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = epoch_order(n, seed, epoch);
    (0..workers)
        .map(|w| order.iter().skip(w).step_by(workers).copied().collect())
        .collect()
}

/// One epoch of BMUF training; updates `state` in place.
pub fn run_epoch<T: Scalar>(
    obj: &dyn Objective<T>,
    state: &mut GlobalState<T>,
    cfg: &BmufConfig,
    tcfg: &TrainConfig,
    lr: f64,
    epoch: usize,
) -> Result<EpochResult> {
    cfg.validate()?;
    let shards: Vec<Vec<Vec<usize>>> = shard_order(obj.len(), cfg.workers, tcfg.seed, epoch)
        .iter()
        .map(|s| make_batches(s, tcfg.batch_size))
        .collect();
    let blocks = shards.iter().map(Vec::len).max().unwrap_or(0).div_ceil(cfg.block_steps);
    let mut log = Vec::new();
    let (mut total, mut count) = (0.0, 0usize);
    for b in 0..blocks {
        let lo = b * cfg.block_steps;
        let block_shards: Vec<Vec<Vec<usize>>> = shards
            .iter()
            .map(|s| s.iter().skip(lo).take(cfg.block_steps).cloned().collect())
            .collect();
        let start = state.broadcast();
        let results = run_block(obj, &start, &block_shards, lr, tcfg.momentum, tcfg.grad_clip, tcfg.seed, epoch)?;
        for (w, r) in results.iter().enumerate() {
            match r.loss {
                Some(l) => {
                    log.push(format!("{}\t{w}\t{l:.6}", state.block + 1));
                    total += l;
                    count += 1;
                }
                None => log.push(format!("{}\t{w}\tempty", state.block + 1)),
            }
        }
        let params: Vec<ParamStore<T>> = results.into_iter().map(|r| r.params).collect();
        *state = aggregate_block(state, &params, cfg)?;
    }
    Ok(EpochResult {
        loss: if count > 0 { total / count as f64 } else { 0.0 },
        log,
    })
}
