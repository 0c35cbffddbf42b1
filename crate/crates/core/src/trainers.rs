//! IPS, quadratic-penalty, minimax primal-dual and meta-gradient trainers.
//!
//! All trainers share the same epoch loop: the training set is shuffled once
//! per epoch with a seeded ChaCha stream and cut into consecutive batches, so a
//! run is a deterministic function of data order, seed and configuration.
//!
//! The meta-gradient trainer differentiates the meta loss through one
//! vanilla gradient step on the inner loss. Because `u_k` and `v_k` enter the
//! inner loss only through the multipliers `e^{u_k}` and `e^{v_k}`,
//!
//! ```text
//! theta'   = theta - eta * grad_theta L_inner(theta, u, v)
//! d theta' / d u_k = -eta * e^{u_k} * grad_theta P_k^min(theta)
//! d L_meta(theta') / d u_k = -eta * e^{u_k} * <grad L_meta(theta'), grad_theta P_k^min(theta)>
//! ```
//!
//! which needs only first-order gradients.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::DomainBounds;
use crate::error::{Error, Result};
use crate::gradcore::Matrix;
use crate::math;
use crate::objectives::{
    batch_replication, batch_violation_rates, dot_tensors, inner_loss, ips_batch_loss, meta_loss,
    quadratic_loss, Batch, DomainPrior, InnerTerms, LoggedSample, PenaltyWeights, Wrt,
};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::policy::PolicyParams;

/// Abort when any parameter grows past this magnitude.
pub const MAX_PARAM_ABS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Method {
    Ips,
    Quadratic,
    Minimax,
    Metagrad,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ips, Method::Quadratic, Method::Minimax, Method::Metagrad];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ips => "ips",
            Method::Quadratic => "quadratic",
            Method::Minimax => "minimax",
            Method::Metagrad => "metagrad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Loop settings shared by every trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Record a trace row every `log_every` iterations.
    pub log_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 32,
            batch_size: 256,
            seed: 1,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MinimaxConfig {
    /// Max-player learning rate.
    pub eta: f64,
    /// Learning-rate decay applied after every max-player update.
    pub gamma: f64,
    /// Max-player update period (in iterations).
    pub tau: f64,
    /// Period decay applied after every max-player update.
    pub xi: f64,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            gamma: 1.0,
            tau: 1.0,
            xi: 1.0,
        }
    }
}

impl MinimaxConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("minimax eta must be > 0, got {}", self.eta)));
        }
        if !unit(self.gamma) || !unit(self.xi) {
            return Err(Error::config("minimax gamma and xi must lie in (0, 1]"));
        }
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("minimax tau must be >= 1, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetaGradConfig {
    /// Step size of the differentiable inner gradient step.
    pub eta_inner: f64,
    /// Balance between the bandit loss and the macro penalty in the meta loss.
    pub lambda: f64,
}

impl Default for MetaGradConfig {
    fn default() -> Self {
        Self {
            eta_inner: 0.01,
            lambda: 1.0,
        }
    }
}

impl MetaGradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_inner > 0.0 && self.eta_inner.is_finite()) {
            return Err(Error::config("metagrad eta_inner must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("metagrad lambda must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One trace row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainRecord {
    pub iteration: u64,
    pub epoch: usize,
    /// Training loss of the batch before the parameter update.
    pub loss: f64,
    /// Batch IPS reward estimate before the update.
    pub reward: f64,
    pub micro_violation: f64,
    pub macro_violation: f64,
    /// Penalty weights after this iteration's update.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Max-player bookkeeping of a minimax run.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MinimaxSummary {
    pub updates: u64,
    pub eta: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<TrainRecord>,
    pub iterations: u64,
    pub epochs_run: usize,
    pub final_weights: PenaltyWeights,
    pub minimax: Option<MinimaxSummary>,
    /// Set by whoever persists the final checkpoint.
    pub checkpoint_path: Option<String>,
}

impl TrainReport {
    fn new(method: Method, seed: u64, num_domains: usize) -> Self {
        Self {
            method,
            seed,
            records: Vec::new(),
            iterations: 0,
            epochs_run: 0,
            final_weights: PenaltyWeights::zeros(num_domains),
            minimax: None,
            checkpoint_path: None,
        }
    }

    /// Trace of `u_k` across logged iterations.
    pub fn u_trace(&self, k: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.u[k]).collect()
    }

    /// Trace of the mean of `u` across logged iterations.
    pub fn mean_u_trace(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.u.iter().sum::<f64>() / r.u.len().max(1) as f64)
            .collect()
    }
}

/// Whether training continues after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Called after every completed epoch with the current parameters.
pub trait EpochObserver {
    fn on_epoch(&mut self, epoch: usize, params: &PolicyParams, weights: &PenaltyWeights) -> Result<Flow>;
}

/// Observer that never stops training.
pub struct RunAll;

impl EpochObserver for RunAll {
    fn on_epoch(&mut self, _: usize, _: &PolicyParams, _: &PenaltyWeights) -> Result<Flow> {
        Ok(Flow::Continue)
    }
}

/// Keeps a copy of the parameters after every epoch.
#[derive(Default)]
pub struct KeepCheckpoints {
    pub checkpoints: Vec<(usize, PolicyParams)>,
}

impl EpochObserver for KeepCheckpoints {
    fn on_epoch(&mut self, epoch: usize, params: &PolicyParams, _: &PenaltyWeights) -> Result<Flow> {
        self.checkpoints.push((epoch, params.clone()));
        Ok(Flow::Continue)
    }
}

/// Training data and the per-domain bounds the penalties and trace use.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub samples: &'a [LoggedSample],
    pub bounds: &'a DomainBounds,
}

impl<'a> TrainData<'a> {
    pub fn new(samples: &'a [LoggedSample], bounds: &'a DomainBounds) -> Self {
        Self { samples, bounds }
    }

    fn num_domains(&self) -> usize {
        self.bounds.len()
    }
}

struct EpochBatches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl EpochBatches {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
        }
    }

    /// Shuffled index chunks for the next epoch.
    fn next_epoch(&mut self, batch_size: usize) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(batch_size).map(|c| c.to_vec()).collect()
    }
}

fn check_options(data: &TrainData<'_>, opts: &TrainOptions) -> Result<()> {
    if data.samples.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if opts.log_every == 0 {
        return Err(Error::config("log_every must be positive"));
    }
    Ok(())
}

fn make_batch<'a>(data: &TrainData<'a>, idx: &[usize]) -> Result<Batch<'a>> {
    Batch::new(idx.iter().map(|&i| &data.samples[i]).collect(), data.bounds)
}

fn check_loss(loss: f64, t: u64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence {
            iteration: t,
            reason: format!("non-finite loss {loss}"),
        });
    }
    Ok(())
}

fn check_grads(grads: &[Matrix], t: u64) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            iteration: t,
            reason: "non-finite gradient".into(),
        });
    }
    Ok(())
}

fn check_params(params: &PolicyParams, t: u64) -> Result<()> {
    let m = params.max_abs();
    if m.is_nan() || m > MAX_PARAM_ABS {
        return Err(Error::Divergence {
            iteration: t,
            reason: format!("parameter magnitude {m} exceeds {MAX_PARAM_ABS}"),
        });
    }
    Ok(())
}

fn record(
    report: &mut TrainReport,
    t: u64,
    epoch: usize,
    loss: f64,
    ips_mean: f64,
    rates: (f64, f64),
    pw: &PenaltyWeights,
) {
    report.records.push(TrainRecord {
        iteration: t,
        epoch,
        loss,
        reward: -ips_mean,
        micro_violation: rates.0,
        macro_violation: rates.1,
        u: pw.u.clone(),
        v: pw.v.clone(),
    });
}

fn mean_of(graph_ips: &[f64]) -> f64 {
    graph_ips.iter().sum::<f64>() / graph_ips.len().max(1) as f64
}

/// Minimizes the mean IPS loss; no constraint terms.
pub fn train_ips(
    data: TrainData<'_>,
    mut params: PolicyParams,
    opt: OptimizerConfig,
    opts: TrainOptions,
    observer: &mut dyn EpochObserver,
) -> Result<(PolicyParams, TrainReport)> {
    check_options(&data, &opts)?;
    let m = data.num_domains();
    let mut report = TrainReport::new(Method::Ips, opts.seed, m);
    let mut optimizer = OptimizerState::new(opt);
    let mut batches = EpochBatches::new(data.samples.len(), opts.seed);
    let pw = PenaltyWeights::zeros(m);
    let mut t = 0u64;
    for epoch in 1..=opts.epochs {
        for idx in batches.next_epoch(opts.batch_size) {
            let batch = make_batch(&data, &idx)?;
            let graph = ips_batch_loss(&batch, &params)?;
            let grads = graph.gradients()?;
            check_loss(grads.loss, t)?;
            check_grads(&grads.params, t)?;
            if t.is_multiple_of(opts.log_every) {
                let rep = batch_replication(&batch, &params)?;
                let rates = batch_violation_rates(&batch, &rep);
                let ips = mean_of(graph.tape.value(graph.ips).as_slice());
                record(&mut report, t, epoch, grads.loss, ips, rates, &pw);
            }
            optimizer.step_tensors(params.tensors_mut(), &grads.params);
            check_params(&params, t)?;
            t += 1;
        }
        report.epochs_run = epoch;
        if observer.on_epoch(epoch, &params, &pw)? == Flow::Stop {
            break;
        }
    }
    report.iterations = t;
    report.final_weights = pw;
    Ok((params, report))
}

/// Minimizes `mean[ips + w (pen_min^2 + pen_max^2)]` with a fixed `w`.
pub fn train_quadratic(
    data: TrainData<'_>,
    mut params: PolicyParams,
    opt: OptimizerConfig,
    w: f64,
    opts: TrainOptions,
    observer: &mut dyn EpochObserver,
) -> Result<(PolicyParams, TrainReport)> {
    check_options(&data, &opts)?;
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::config(format!("quadratic weight must be >= 0, got {w}")));
    }
    let m = data.num_domains();
    let mut report = TrainReport::new(Method::Quadratic, opts.seed, m);
    let mut optimizer = OptimizerState::new(opt);
    let mut batches = EpochBatches::new(data.samples.len(), opts.seed);
    let pw = PenaltyWeights::zeros(m);
    let mut t = 0u64;
    for epoch in 1..=opts.epochs {
        for idx in batches.next_epoch(opts.batch_size) {
            let batch = make_batch(&data, &idx)?;
            let graph = quadratic_loss(&batch, &params, w)?;
            let grads = graph.gradients()?;
            check_loss(grads.loss, t)?;
            check_grads(&grads.params, t)?;
            if t.is_multiple_of(opts.log_every) {
                let rep = graph.replication_values().unwrap_or_default();
                let rates = batch_violation_rates(&batch, rep);
                let ips = mean_of(graph.tape.value(graph.ips).as_slice());
                record(&mut report, t, epoch, grads.loss, ips, rates, &pw);
            }
            optimizer.step_tensors(params.tensors_mut(), &grads.params);
            check_params(&params, t)?;
            t += 1;
        }
        report.epochs_run = epoch;
        if observer.on_epoch(epoch, &params, &pw)? == Flow::Stop {
            break;
        }
    }
    report.iterations = t;
    report.final_weights = pw;
    Ok((params, report))
}

/// Minimax primal-dual training.
///
/// Every iteration computes the inner loss `L` once. When
/// `t mod round(tau) == 0` the max player ascends `u += eta grad_u L`,
/// `v += eta grad_v L`, then `eta *= gamma` and `tau *= xi`. The min player
/// always takes an optimizer step on `grad_theta L`.
pub fn train_minimax(
    data: TrainData<'_>,
    mut params: PolicyParams,
    opt: OptimizerConfig,
    cfg: MinimaxConfig,
    opts: TrainOptions,
    observer: &mut dyn EpochObserver,
) -> Result<(PolicyParams, TrainReport)> {
    check_options(&data, &opts)?;
    cfg.validate()?;
    let m = data.num_domains();
    let mut report = TrainReport::new(Method::Minimax, opts.seed, m);
    let mut optimizer = OptimizerState::new(opt);
    let mut batches = EpochBatches::new(data.samples.len(), opts.seed);
    let mut pw = PenaltyWeights::zeros(m);
    let (mut eta, mut tau) = (cfg.eta, cfg.tau);
    let mut updates = 0u64;
    let mut t = 0u64;
    for epoch in 1..=opts.epochs {
        for idx in batches.next_epoch(opts.batch_size) {
            let batch = make_batch(&data, &idx)?;
            let graph = inner_loss(&batch, &params, &pw, Wrt::BOTH)?;
            let grads = graph.gradients()?;
            check_loss(grads.loss, t)?;
            check_grads(&grads.params, t)?;

            let period = (math::round(tau) as u64).max(1);
            if t.is_multiple_of(period) {
                for (x, g) in pw.u.iter_mut().zip(&grads.u) {
                    *x += eta * g;
                }
                for (x, g) in pw.v.iter_mut().zip(&grads.v) {
                    *x += eta * g;
                }
                pw.clamp();
                eta *= cfg.gamma;
                tau *= cfg.xi;
                updates += 1;
            }
            if t.is_multiple_of(opts.log_every) {
                let rep = graph.replication_values().unwrap_or_default();
                let rates = batch_violation_rates(&batch, rep);
                let ips = mean_of(graph.tape.value(graph.ips).as_slice());
                record(&mut report, t, epoch, grads.loss, ips, rates, &pw);
            }
            optimizer.step_tensors(params.tensors_mut(), &grads.params);
            check_params(&params, t)?;
            t += 1;
        }
        report.epochs_run = epoch;
        if observer.on_epoch(epoch, &params, &pw)? == Flow::Stop {
            break;
        }
    }
    report.iterations = t;
    report.final_weights = pw;
    report.minimax = Some(MinimaxSummary { updates, eta, tau });
    Ok((params, report))
}

/// Gradient of the meta loss with respect to `(u, v)` through one inner
/// gradient step, plus the inner-loss decomposition it was built from.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub meta_loss: f64,
    pub inner: InnerTerms,
}

/// Analytic meta-gradient of `L_meta(theta'(u, v))` where
/// `theta' = theta - eta_inner * grad_theta L_inner(theta, u, v)` on
/// `batch_inner` and `L_meta` is evaluated on `batch_meta`.
pub fn metagrad_uv_gradient(
    batch_inner: &Batch<'_>,
    batch_meta: &Batch<'_>,
    params: &PolicyParams,
    pw: &PenaltyWeights,
    cfg: &MetaGradConfig,
    bounds: &DomainBounds,
    prior: &DomainPrior,
) -> Result<MetaGradient> {
    cfg.validate()?;
    if pw.len() != bounds.len() {
        return Err(Error::Shape {
            op: "penalty weights",
            lhs: (pw.len(), 1),
            rhs: (bounds.len(), 1),
        });
    }
    let inner = InnerTerms::compute(batch_inner, params, bounds)?;
    let g_inner = inner.param_gradient(pw);
    let mut cloned = params.clone();
    cloned.axpy(-cfg.eta_inner, &g_inner);

    let meta = meta_loss(batch_meta, &cloned, prior, cfg.lambda)?;
    let meta_grads = meta.gradients()?;
    let g_meta = &meta_grads.params;

    let m = pw.len();
    let mut grad_u = vec![0.0; m];
    let mut grad_v = vec![0.0; m];
    for k in 0..m {
        if let Some(gk) = &inner.grad_min[k] {
            grad_u[k] = -cfg.eta_inner * math::exp(pw.u[k]) * dot_tensors(g_meta, gk);
        }
        if let Some(gk) = &inner.grad_max[k] {
            grad_v[k] = -cfg.eta_inner * math::exp(pw.v[k]) * dot_tensors(g_meta, gk);
        }
    }
    if grad_u.iter().chain(&grad_v).any(|x| !x.is_finite()) {
        return Err(Error::Divergence {
            iteration: 0,
            reason: "non-finite meta-gradient".into(),
        });
    }
    Ok(MetaGradient {
        grad_u,
        grad_v,
        meta_loss: meta_grads.loss,
        inner,
    })
}

/// Meta-gradient training.
///
/// Each iteration takes two disjoint batches from the shuffled epoch (inner
/// and meta), computes the meta-gradient for `(u, v)`, updates them with
/// `opt_uv`, then updates the policy with `opt_theta` on the inner loss at
/// the current `theta` and the updated `(u, v)`. The cloned inner step is
/// discarded.
#[allow(clippy::too_many_arguments)]
pub fn train_metagrad(
    data: TrainData<'_>,
    mut params: PolicyParams,
    opt_theta: OptimizerConfig,
    opt_uv: OptimizerConfig,
    cfg: MetaGradConfig,
    prior: &DomainPrior,
    opts: TrainOptions,
    observer: &mut dyn EpochObserver,
) -> Result<(PolicyParams, TrainReport)> {
    check_options(&data, &opts)?;
    cfg.validate()?;
    let m = data.num_domains();
    if data.samples.len() < 2 * opts.batch_size.min(data.samples.len() / 2).max(1) {
        return Err(Error::config("metagrad needs at least two samples per batch pair"));
    }
    let mut report = TrainReport::new(Method::Metagrad, opts.seed, m);
    let mut theta_opt = OptimizerState::new(opt_theta);
    let mut uv_opt = OptimizerState::new(opt_uv);
    let mut batches = EpochBatches::new(data.samples.len(), opts.seed);
    let mut pw = PenaltyWeights::zeros(m);
    // Pairs must have equal sizes; with fewer than two full batches the
    // epoch is split in half instead.
    let pair_size = opts.batch_size.min(data.samples.len() / 2);
    let mut t = 0u64;
    for epoch in 1..=opts.epochs {
        let chunks = batches.next_epoch(pair_size);
        for pair in chunks.chunks_exact(2) {
            if pair[0].len() != pair[1].len() {
                continue;
            }
            let inner_batch = make_batch(&data, &pair[0])?;
            let meta_batch = make_batch(&data, &pair[1])?;
            let mg = metagrad_uv_gradient(&inner_batch, &meta_batch, &params, &pw, &cfg, data.bounds, prior)
                .map_err(|e| match e {
                    Error::Divergence { reason, .. } => Error::Divergence { iteration: t, reason },
                    other => other,
                })?;
            {
                let (u, v) = (&mut pw.u, &mut pw.v);
                uv_opt.step(&mut [u.as_mut_slice(), v.as_mut_slice()], &[&mg.grad_u, &mg.grad_v]);
            }
            pw.clamp();

            let loss = mg.inner.loss(&pw);
            check_loss(loss, t)?;
            let grads = mg.inner.param_gradient(&pw);
            check_grads(&grads, t)?;
            if t.is_multiple_of(opts.log_every) {
                let rates = batch_violation_rates(&inner_batch, &mg.inner.replication);
                record(&mut report, t, epoch, loss, mg.inner.ips, rates, &pw);
            }
            theta_opt.step_tensors(params.tensors_mut(), &grads);
            check_params(&params, t)?;
            t += 1;
        }
        report.epochs_run = epoch;
        if observer.on_epoch(epoch, &params, &pw)? == Flow::Stop {
            break;
        }
    }
    report.iterations = t;
    report.final_weights = pw;
    Ok((params, report))
}

/// Validation metrics of one checkpoint, used for model selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointScore {
    pub epoch: usize,
    pub macro_violation: f64,
    pub expected_reward: f64,
}

/// Index of the best checkpoint: lowest macro violation rate, then higher
/// expected reward, then earlier epoch. `None` for an empty slice.
pub fn best_checkpoint(scores: &[CheckpointScore]) -> Option<usize> {
    let better = |a: &CheckpointScore, b: &CheckpointScore| {
        if a.macro_violation != b.macro_violation {
            return a.macro_violation < b.macro_violation;
        }
        if a.expected_reward != b.expected_reward {
            return a.expected_reward > b.expected_reward;
        }
        a.epoch < b.epoch
    };
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if better(s, &scores[b]) => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Picks the checkpoint with the lowest macro violation rate on `validation`
/// (ties: higher expected reward, then earlier epoch).
pub fn select_best<'p>(
    checkpoints: &'p [(usize, PolicyParams)],
    validation: &[LoggedSample],
    bounds: &DomainBounds,
) -> Result<&'p PolicyParams> {
    if checkpoints.is_empty() {
        return Err(Error::config("no checkpoints to select from"));
    }
    if validation.is_empty() {
        return Err(Error::config("validation data is empty"));
    }
    let scores = checkpoints
        .iter()
        .map(|(epoch, params)| {
            let rates = crate::eval::violation_rates(validation, params, bounds)?;
            let (reward, _) = crate::eval::expected_reward(validation, params)?;
            Ok(CheckpointScore {
                epoch: *epoch,
                macro_violation: rates.macro_rate,
                expected_reward: reward,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let i = best_checkpoint(&scores).expect("non-empty");
    Ok(&checkpoints[i].1)
}
