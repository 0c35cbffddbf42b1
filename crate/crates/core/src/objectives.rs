//! Replication, IPS, hinge penalties and the batch losses built from them.
//!
//! Scalar helpers ([`replication`], [`ips_loss`], [`hinge_penalties`]) work
//! on plain slices. The batch losses record a whole minibatch on one
//! [`Tape`] so gradients with respect to the policy and the penalty weights
//! come from a single backward sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::bench::{Bounds, DomainBounds};
use crate::error::{Error, Result};
use crate::gradcore::{Matrix, Tape, Var};
use crate::math;
use crate::policy::{CandidateSet, ParamVars, PolicyParams, StackedCandidates};

/// Smallest accepted logged propensity of the chosen action.
pub const PROPENSITY_FLOOR: f64 = 1e-4;

/// Penalty weights `u`, `v` are kept inside `[-UV_CLAMP, UV_CLAMP]`.
pub const UV_CLAMP: f64 = 30.0;

const SIMPLEX_TOL: f64 = 1e-6;

/// One logged interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedSample {
    candidates: CandidateSet,
    p0: Vec<f64>,
    action: usize,
    reward: f64,
    domain: usize,
}

impl LoggedSample {
    pub fn new(
        candidates: CandidateSet,
        p0: Vec<f64>,
        action: usize,
        reward: f64,
        domain: usize,
    ) -> Result<Self> {
        if p0.len() != candidates.len() {
            return Err(Error::sample(format!(
                "{} propensities for {} candidates",
                p0.len(),
                candidates.len()
            )));
        }
        if p0.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::sample("propensities must be finite and non-negative"));
        }
        let total: f64 = p0.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::sample(format!("propensities sum to {total}")));
        }
        if action >= candidates.len() {
            return Err(Error::sample(format!(
                "action {action} out of range for {} candidates",
                candidates.len()
            )));
        }
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::sample(format!("reward {reward} outside [0, 1]")));
        }
        if p0[action] < PROPENSITY_FLOOR {
            return Err(Error::PropensityFloor {
                propensity: p0[action],
                floor: PROPENSITY_FLOOR,
            });
        }
        Ok(Self {
            candidates,
            p0,
            action,
            reward,
            domain,
        })
    }

    pub fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn action(&self) -> usize {
        self.action
    }

    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn domain(&self) -> usize {
        self.domain
    }

    /// Copy with a different reward (kept inside `[0, 1]` by the caller).
    pub fn with_reward(&self, reward: f64) -> Result<Self> {
        Self::new(self.candidates.clone(), self.p0.clone(), self.action, reward, self.domain)
    }
}

/// Dual variables, one `(u_k, v_k)` pair per domain.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PenaltyWeights {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PenaltyWeights {
    pub fn zeros(num_domains: usize) -> Self {
        Self {
            u: vec![0.0; num_domains],
            v: vec![0.0; num_domains],
        }
    }

    pub fn filled(num_domains: usize, value: f64) -> Self {
        let mut pw = Self {
            u: vec![value; num_domains],
            v: vec![value; num_domains],
        };
        pw.clamp();
        pw
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn clamp(&mut self) {
        for x in self.u.iter_mut().chain(self.v.iter_mut()) {
            *x = x.clamp(-UV_CLAMP, UV_CLAMP);
        }
    }
}

/// Prior probability of each domain.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DomainPrior {
    p: Vec<f64>,
}

impl DomainPrior {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::config("domain prior is empty"));
        }
        if p.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::config("domain prior entries must be positive"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::config(format!("domain prior sums to {total}")));
        }
        Ok(Self { p })
    }

    /// Empirical domain frequencies with one pseudo-count per domain, so
    /// domains absent from `samples` keep a positive prior.
    pub fn from_samples(samples: &[LoggedSample], num_domains: usize) -> Result<Self> {
        let mut counts = vec![1.0; num_domains];
        for s in samples {
            if s.domain() >= num_domains {
                return Err(Error::sample(format!("domain id {} >= {num_domains}", s.domain())));
            }
            counts[s.domain()] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        Self::new(counts.into_iter().map(|c| c / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn get(&self, k: usize) -> f64 {
        self.p[k]
    }
}

/// `1 - |p_theta - p_0|_1 / 2`.
pub fn replication(p_theta: &[f64], p_0: &[f64]) -> Result<f64> {
    if p_theta.len() != p_0.len() {
        return Err(Error::Shape {
            op: "replication",
            lhs: (1, p_theta.len()),
            rhs: (1, p_0.len()),
        });
    }
    let l1: f64 = p_theta.iter().zip(p_0).map(|(a, b)| (a - b).abs()).sum();
    Ok(1.0 - l1 / 2.0)
}

/// `-r * p_theta(a) / p_0(a)`.
pub fn ips_loss(sample: &LoggedSample, p_theta: &[f64]) -> Result<f64> {
    if p_theta.len() != sample.p0.len() {
        return Err(Error::Shape {
            op: "ips_loss",
            lhs: (1, p_theta.len()),
            rhs: (1, sample.p0.len()),
        });
    }
    let a = sample.action;
    Ok(-sample.reward * p_theta[a] / sample.p0[a])
}

/// `(max(0, c_min - R), max(0, R - c_max))`.
pub fn hinge_penalties(replication: f64, c_min: f64, c_max: f64) -> Result<(f64, f64)> {
    Bounds::new(c_min, c_max)?;
    Ok((hinge(c_min - replication), hinge(replication - c_max)))
}

fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Constant inputs of one minibatch laid out for the tape.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    samples: Vec<&'a LoggedSample>,
    stacked: StackedCandidates,
    /// Padded logged propensities, `rows x width`.
    p0: Matrix,
    /// `-r / p0(a)` at the chosen action, zero elsewhere.
    ips_coef: Matrix,
    c_min: Matrix,
    c_max: Matrix,
    /// `rows x num_domains` one-hot.
    domain_onehot: Matrix,
    num_domains: usize,
}

impl<'a> Batch<'a> {
    pub fn new(samples: Vec<&'a LoggedSample>, bounds: &DomainBounds) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("batch is empty"));
        }
        let m = bounds.len();
        let sets: Vec<&CandidateSet> = samples.iter().map(|s| &s.candidates).collect();
        let stacked = StackedCandidates::new(&sets)?;
        let (rows, width) = (stacked.rows, stacked.width);
        let mut p0 = Matrix::zeros(rows, width);
        let mut ips_coef = Matrix::zeros(rows, width);
        let mut c_min = Matrix::zeros(rows, 1);
        let mut c_max = Matrix::zeros(rows, 1);
        let mut domain_onehot = Matrix::zeros(rows, m);
        for (r, s) in samples.iter().enumerate() {
            if s.domain >= m {
                return Err(Error::sample(format!("domain id {} has no resolved bounds", s.domain)));
            }
            for (c, &p) in s.p0.iter().enumerate() {
                p0.set(r, c, p);
            }
            ips_coef.set(r, s.action, -s.reward / s.p0[s.action]);
            let b = bounds.get(s.domain);
            c_min.set(r, 0, b.c_min);
            c_max.set(r, 0, b.c_max);
            domain_onehot.set(r, s.domain, 1.0);
        }
        Ok(Self {
            samples,
            stacked,
            p0,
            ips_coef,
            c_min,
            c_max,
            domain_onehot,
            num_domains: m,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[&'a LoggedSample] {
        &self.samples
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn bounds_of(&self, row: usize) -> Bounds {
        Bounds {
            c_min: self.c_min.get(row, 0),
            c_max: self.c_max.get(row, 0),
        }
    }
}

/// Which leaves of a loss graph are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wrt {
    pub params: bool,
    pub weights: bool,
}

impl Wrt {
    pub const PARAMS: Wrt = Wrt {
        params: true,
        weights: false,
    };
    pub const WEIGHTS: Wrt = Wrt {
        params: false,
        weights: true,
    };
    pub const BOTH: Wrt = Wrt {
        params: true,
        weights: true,
    };
}

/// A recorded batch loss with handles to the interesting nodes.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub tape: Tape,
    pub params: ParamVars,
    pub u: Option<Var>,
    pub v: Option<Var>,
    pub loss: Var,
    /// Per-sample replication, `rows x 1` (absent for the pure IPS loss).
    pub replication: Option<Var>,
    /// Per-sample IPS loss, `rows x 1`.
    pub ips: Var,
}

/// Gradients extracted from a [`LossGraph`].
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    /// Same order as [`PolicyParams::tensors`].
    pub params: Vec<Matrix>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).item()
    }

    /// Per-sample replication values, if recorded.
    pub fn replication_values(&self) -> Option<&[f64]> {
        self.replication.map(|r| self.tape.value(r).as_slice())
    }

    pub fn gradients(&self) -> Result<LossGrads> {
        let mut g = self.tape.backward(self.loss)?;
        let params = self.params.vars.iter().map(|&v| g.take(v)).collect();
        let u = self.u.map(|u| g.take(u).into_vec()).unwrap_or_default();
        let v = self.v.map(|v| g.take(v).into_vec()).unwrap_or_default();
        Ok(LossGrads {
            loss: self.value(),
            params,
            u,
            v,
        })
    }
}

struct Pieces {
    tape: Tape,
    params: ParamVars,
    ips: Var,
    replication: Var,
    pen_min: Var,
    pen_max: Var,
}

fn record_ips(tape: &mut Tape, batch: &Batch<'_>, probs: Var) -> Result<Var> {
    let coef = tape.constant(batch.ips_coef.clone());
    let weighted = tape.mul(probs, coef)?;
    tape.row_sum(weighted)
}

fn record_pieces(batch: &Batch<'_>, params: &PolicyParams, trainable: bool) -> Result<Pieces> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, trainable);
    let probs = params.propensities_on_tape(&mut tape, &vars, &batch.stacked)?;
    let ips = record_ips(&mut tape, batch, probs)?;

    let p0 = tape.constant(batch.p0.clone());
    let diff = tape.sub(probs, p0)?;
    let abs = tape.abs(diff);
    let l1 = tape.row_sum(abs)?;
    let half = tape.scale(l1, -0.5);
    let replication = tape.add_scalar(half, 1.0);

    let c_min = tape.constant(batch.c_min.clone());
    let c_max = tape.constant(batch.c_max.clone());
    let below = tape.sub(c_min, replication)?;
    let pen_min = tape.max0(below);
    let above = tape.sub(replication, c_max)?;
    let pen_max = tape.max0(above);
    Ok(Pieces {
        tape,
        params: vars,
        ips,
        replication,
        pen_min,
        pen_max,
    })
}

fn check_weights(batch: &Batch<'_>, pw: &PenaltyWeights) -> Result<()> {
    if pw.u.len() != batch.num_domains || pw.v.len() != batch.num_domains {
        return Err(Error::Shape {
            op: "penalty weights",
            lhs: (pw.u.len(), pw.v.len()),
            rhs: (batch.num_domains, batch.num_domains),
        });
    }
    Ok(())
}

/// Mean IPS loss alone.
pub fn ips_batch_loss(batch: &Batch<'_>, params: &PolicyParams) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let probs = params.propensities_on_tape(&mut tape, &vars, &batch.stacked)?;
    let ips = record_ips(&mut tape, batch, probs)?;
    let loss = tape.mean(ips);
    Ok(LossGraph {
        tape,
        params: vars,
        u: None,
        v: None,
        loss,
        replication: None,
        ips,
    })
}

/// `mean[ips + e^{u_k} pen_min + e^{v_k} pen_max]`.
pub fn inner_loss(
    batch: &Batch<'_>,
    params: &PolicyParams,
    pw: &PenaltyWeights,
    wrt: Wrt,
) -> Result<LossGraph> {
    check_weights(batch, pw)?;
    let mut p = record_pieces(batch, params, wrt.params)?;
    let t = &mut p.tape;
    let u_m = Matrix::column(pw.u.clone());
    let v_m = Matrix::column(pw.v.clone());
    let (u, v) = if wrt.weights {
        (t.param(u_m), t.param(v_m))
    } else {
        (t.constant(u_m), t.constant(v_m))
    };
    let onehot = t.constant(batch.domain_onehot.clone());
    let eu = t.exp(u);
    let ev = t.exp(v);
    let w_min = t.matmul(onehot, eu)?;
    let w_max = t.matmul(onehot, ev)?;
    let a = t.mul(w_min, p.pen_min)?;
    let b = t.mul(w_max, p.pen_max)?;
    let s = t.add(p.ips, a)?;
    let s = t.add(s, b)?;
    let loss = t.mean(s);
    Ok(LossGraph {
        tape: p.tape,
        params: p.params,
        u: Some(u),
        v: Some(v),
        loss,
        replication: Some(p.replication),
        ips: p.ips,
    })
}

/// The inner loss viewed as a function of the penalty weights only.
pub fn max_player_loss(
    batch: &Batch<'_>,
    params: &PolicyParams,
    pw: &PenaltyWeights,
) -> Result<LossGraph> {
    inner_loss(batch, params, pw, Wrt::WEIGHTS)
}

/// `(1 - lambda) mean(ips) + lambda mean((pen_min + pen_max) / p(k))`.
pub fn meta_loss(
    batch: &Batch<'_>,
    params: &PolicyParams,
    prior: &DomainPrior,
    lambda: f64,
) -> Result<LossGraph> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    if prior.as_slice().len() != batch.num_domains {
        return Err(Error::Shape {
            op: "domain prior",
            lhs: (prior.as_slice().len(), 1),
            rhs: (batch.num_domains, 1),
        });
    }
    if prior.as_slice().iter().any(|&p| p <= 0.0) {
        return Err(Error::config("zero domain prior"));
    }
    let mut p = record_pieces(batch, params, true)?;
    let t = &mut p.tape;
    let inv = Matrix::column(batch.samples.iter().map(|s| 1.0 / prior.get(s.domain)).collect());
    let inv = t.constant(inv);
    let pen = t.add(p.pen_min, p.pen_max)?;
    let macro_pen = t.mul(pen, inv)?;
    let ips_mean = t.mean(p.ips);
    let pen_mean = t.mean(macro_pen);
    let a = t.scale(ips_mean, 1.0 - lambda);
    let b = t.scale(pen_mean, lambda);
    let loss = t.add(a, b)?;
    Ok(LossGraph {
        tape: p.tape,
        params: p.params,
        u: None,
        v: None,
        loss,
        replication: Some(p.replication),
        ips: p.ips,
    })
}

/// `mean[ips + w (pen_min^2 + pen_max^2)]` with a fixed weight `w`.
pub fn quadratic_loss(batch: &Batch<'_>, params: &PolicyParams, w: f64) -> Result<LossGraph> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::config(format!("quadratic penalty weight {w} must be >= 0")));
    }
    let mut p = record_pieces(batch, params, true)?;
    let t = &mut p.tape;
    let sq_min = t.mul(p.pen_min, p.pen_min)?;
    let sq_max = t.mul(p.pen_max, p.pen_max)?;
    let sq = t.add(sq_min, sq_max)?;
    let pen = t.scale(sq, w);
    let s = t.add(p.ips, pen)?;
    let loss = t.mean(s);
    Ok(LossGraph {
        tape: p.tape,
        params: p.params,
        u: None,
        v: None,
        loss,
        replication: Some(p.replication),
        ips: p.ips,
    })
}

/// Which hinge of a sample is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Hinge {
    Min,
    Max,
}

/// Gradient with respect to the policy of
/// `P_k = (1 / |batch|) * sum over domain-k samples of the selected hinge`.
///
/// Only samples whose hinge is strictly active contribute (the subgradient at
/// the kink is 0), so the graph is recorded on that subset alone.
pub fn domain_penalty_gradient(
    batch: &Batch<'_>,
    params: &PolicyParams,
    bounds: &DomainBounds,
    rows: &[usize],
    hinge: Hinge,
) -> Result<Vec<Matrix>> {
    if rows.is_empty() {
        return Ok(params.zeros_like());
    }
    let sub: Vec<&LoggedSample> = rows.iter().map(|&r| batch.samples[r]).collect();
    let sub = Batch::new(sub, bounds)?;
    let mut p = record_pieces(&sub, params, true)?;
    let node = match hinge {
        Hinge::Min => p.pen_min,
        Hinge::Max => p.pen_max,
    };
    let s = p.tape.sum(node);
    let root = p.tape.scale(s, 1.0 / batch.len() as f64);
    let mut g = p.tape.backward(root)?;
    Ok(p.params.vars.iter().map(|&v| g.take(v)).collect())
}

/// Plain (tape-free) per-sample replication and hinge values of a batch.
pub fn batch_replication(batch: &Batch<'_>, params: &PolicyParams) -> Result<Vec<f64>> {
    let probs = params.propensities_stacked(&batch.stacked)?;
    (0..batch.len())
        .map(|r| replication(probs.row_slice(r), batch.p0.row_slice(r)))
        .collect()
}

/// Fraction of violating samples overall and averaged over the domains
/// present, for a batch with known per-sample replication.
pub fn batch_violation_rates(batch: &Batch<'_>, replication: &[f64]) -> (f64, f64) {
    let m = batch.num_domains;
    let mut viol = vec![0usize; m];
    let mut count = vec![0usize; m];
    for (r, s) in batch.samples.iter().enumerate() {
        count[s.domain] += 1;
        if batch.bounds_of(r).violated_by(replication[r]) {
            viol[s.domain] += 1;
        }
    }
    let total: usize = count.iter().sum();
    let micro = viol.iter().sum::<usize>() as f64 / total.max(1) as f64;
    let present: Vec<f64> = (0..m)
        .filter(|&k| count[k] > 0)
        .map(|k| viol[k] as f64 / count[k] as f64)
        .collect();
    let macro_rate = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (micro, macro_rate)
}

/// `e^x` applied to each penalty weight.
pub fn multipliers(weights: &[f64]) -> Vec<f64> {
    weights.iter().map(|&x| math::exp(x)).collect()
}

/// The inner loss split into terms that do not depend on the penalty weights:
///
/// `L(theta, u, v) = ips(theta) + sum_k e^{u_k} P_k^min(theta) + e^{v_k} P_k^max(theta)`
///
/// where `P_k` is the batch-mean hinge restricted to domain-`k` samples. With
/// the terms and their policy gradients in hand, the loss and its gradient can
/// be re-evaluated for any `(u, v)` without another pass over the batch.
#[derive(Debug, Clone)]
pub struct InnerTerms {
    pub ips: f64,
    pub ips_grad: Vec<Matrix>,
    pub pen_min: Vec<f64>,
    pub pen_max: Vec<f64>,
    /// `None` for domains with no active hinge in the batch (zero gradient).
    pub grad_min: Vec<Option<Vec<Matrix>>>,
    pub grad_max: Vec<Option<Vec<Matrix>>>,
    /// Per-sample replication of the batch.
    pub replication: Vec<f64>,
}

impl InnerTerms {
    pub fn compute(batch: &Batch<'_>, params: &PolicyParams, bounds: &DomainBounds) -> Result<Self> {
        let mut p = record_pieces(batch, params, true)?;
        let ips_root = p.tape.mean(p.ips);
        let ips = p.tape.value(ips_root).item();
        let mut g = p.tape.backward(ips_root)?;
        let ips_grad = p.params.vars.iter().map(|&v| g.take(v)).collect();

        let m = batch.num_domains;
        let n = batch.len() as f64;
        let replication = p.tape.value(p.replication).as_slice().to_vec();
        let pmin = p.tape.value(p.pen_min).as_slice();
        let pmax = p.tape.value(p.pen_max).as_slice();
        let mut pen_min = vec![0.0; m];
        let mut pen_max = vec![0.0; m];
        let mut rows_min: Vec<Vec<usize>> = vec![Vec::new(); m];
        let mut rows_max: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (r, s) in batch.samples.iter().enumerate() {
            let k = s.domain;
            if pmin[r] > 0.0 {
                pen_min[k] += pmin[r];
                rows_min[k].push(r);
            }
            if pmax[r] > 0.0 {
                pen_max[k] += pmax[r];
                rows_max[k].push(r);
            }
        }
        for x in pen_min.iter_mut().chain(pen_max.iter_mut()) {
            *x /= n;
        }
        let group = |rows: &[usize], hinge| -> Result<Option<Vec<Matrix>>> {
            if rows.is_empty() {
                Ok(None)
            } else {
                domain_penalty_gradient(batch, params, bounds, rows, hinge).map(Some)
            }
        };
        let grad_min = rows_min.iter().map(|r| group(r, Hinge::Min)).collect::<Result<_>>()?;
        let grad_max = rows_max.iter().map(|r| group(r, Hinge::Max)).collect::<Result<_>>()?;
        Ok(Self {
            ips,
            ips_grad,
            pen_min,
            pen_max,
            grad_min,
            grad_max,
            replication,
        })
    }

    pub fn loss(&self, pw: &PenaltyWeights) -> f64 {
        let mut total = self.ips;
        for k in 0..self.pen_min.len() {
            total += math::exp(pw.u[k]) * self.pen_min[k] + math::exp(pw.v[k]) * self.pen_max[k];
        }
        total
    }

    pub fn param_gradient(&self, pw: &PenaltyWeights) -> Vec<Matrix> {
        let mut g = self.ips_grad.clone();
        for k in 0..self.pen_min.len() {
            for (grads, w) in [(&self.grad_min[k], pw.u[k]), (&self.grad_max[k], pw.v[k])] {
                if let Some(gk) = grads {
                    let scale = math::exp(w);
                    for (acc, t) in g.iter_mut().zip(gk) {
                        acc.axpy(scale, t);
                    }
                }
            }
        }
        g
    }
}

/// Sum of tensor-wise dot products.
pub fn dot_tensors(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}
