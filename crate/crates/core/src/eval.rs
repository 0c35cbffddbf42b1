//! Held-out metrics and multi-seed comparison reports.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::bench::DomainBounds;
use crate::error::{Error, Result};
use crate::math;
use crate::objectives::{replication, LoggedSample};
use crate::policy::{CandidateSet, PolicyParams, StackedCandidates};

/// Samples per forward pass during evaluation.
const CHUNK: usize = 2048;

/// Propensity vectors of `params` for every sample, computed in chunks.
pub fn policy_propensities(samples: &[LoggedSample], params: &PolicyParams) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let sets: Vec<&CandidateSet> = chunk.iter().map(|s| s.candidates()).collect();
        let stacked = StackedCandidates::new(&sets)?;
        let p = params.propensities_stacked(&stacked)?;
        for (r, s) in chunk.iter().enumerate() {
            out.push(p.row_slice(r)[..s.candidates().len()].to_vec());
        }
    }
    Ok(out)
}

/// Per-sample replication against the logged propensities.
pub fn replications(samples: &[LoggedSample], params: &PolicyParams) -> Result<Vec<f64>> {
    let probs = policy_propensities(samples, params)?;
    samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| replication(p, s.p0()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ViolationRates {
    pub micro_rate: f64,
    /// Unweighted mean over the domains that have samples.
    pub macro_rate: f64,
    /// `None` for domains without samples.
    pub per_domain: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

/// Violation rates from known replication values; a sample violates when its
/// replication lies strictly outside its domain's bounds.
pub fn violation_rates_from(samples: &[LoggedSample], replication: &[f64], bounds: &DomainBounds) -> Result<ViolationRates> {
    if samples.is_empty() {
        return Err(Error::config("cannot compute violation rates of an empty dataset"));
    }
    let m = bounds.len();
    let mut viol = vec![0usize; m];
    let mut counts = vec![0usize; m];
    for (s, &r) in samples.iter().zip(replication) {
        let k = s.domain();
        if k >= m {
            return Err(Error::sample(format!("domain id {k} outside the {m} known domains")));
        }
        counts[k] += 1;
        if bounds.get(k).violated_by(r) {
            viol[k] += 1;
        }
    }
    let per_domain: Vec<Option<f64>> = (0..m)
        .map(|k| (counts[k] > 0).then(|| viol[k] as f64 / counts[k] as f64))
        .collect();
    let present: Vec<f64> = per_domain.iter().flatten().copied().collect();
    Ok(ViolationRates {
        micro_rate: viol.iter().sum::<usize>() as f64 / samples.len() as f64,
        macro_rate: present.iter().sum::<f64>() / present.len() as f64,
        per_domain,
        counts,
    })
}

pub fn violation_rates(samples: &[LoggedSample], params: &PolicyParams, bounds: &DomainBounds) -> Result<ViolationRates> {
    let rep = replications(samples, params)?;
    violation_rates_from(samples, &rep, bounds)
}

fn ips_terms(samples: &[LoggedSample], probs: &[Vec<f64>]) -> Vec<f64> {
    samples
        .iter()
        .zip(probs)
        .map(|(s, p)| s.reward() * p[s.action()] / s.p0()[s.action()])
        .collect()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let (m, sd) = math::mean_std(xs);
    (m, sd / math::sqrt(xs.len().max(1) as f64))
}

/// IPS estimate of the policy's expected reward and its standard error.
pub fn expected_reward(samples: &[LoggedSample], params: &PolicyParams) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::config("cannot estimate reward on an empty dataset"));
    }
    let probs = policy_propensities(samples, params)?;
    Ok(mean_se(&ips_terms(samples, &probs)))
}

/// Mean replication of the policy against the logged propensities.
pub fn replication_rate(samples: &[LoggedSample], params: &PolicyParams) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("cannot compute replication on an empty dataset"));
    }
    let rep = replications(samples, params)?;
    Ok(rep.iter().sum::<f64>() / rep.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    pub expected_reward: f64,
    pub reward_std_error: f64,
    pub micro_violation: f64,
    pub macro_violation: f64,
    pub per_domain_violation: Vec<Option<f64>>,
    pub replication_rate: f64,
    pub domain_counts: Vec<usize>,
}

/// All metrics from one forward pass over the data.
pub fn evaluate(samples: &[LoggedSample], params: &PolicyParams, bounds: &DomainBounds) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let probs = policy_propensities(samples, params)?;
    let rep = samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| replication(p, s.p0()))
        .collect::<Result<Vec<_>>>()?;
    let rates = violation_rates_from(samples, &rep, bounds)?;
    let (reward, se) = mean_se(&ips_terms(samples, &probs));
    Ok(EvalResult {
        expected_reward: reward,
        reward_std_error: se,
        micro_violation: rates.micro_rate,
        macro_violation: rates.macro_rate,
        per_domain_violation: rates.per_domain,
        replication_rate: rep.iter().sum::<f64>() / rep.len() as f64,
        domain_counts: rates.counts,
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = math::mean_std(xs);
        Self { mean, std }
    }
}

/// Results of one method, keyed by seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResults {
    pub method: String,
    pub runs: Vec<(u64, EvalResult)>,
    /// Seeds whose run failed.
    pub failed: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MethodSummary {
    pub method: String,
    pub seeds: usize,
    pub failed: Vec<u64>,
    pub expected_reward: Stat,
    pub micro_violation: Stat,
    pub macro_violation: Stat,
    pub replication_rate: Stat,
    /// Relative change of the mean expected reward vs the baseline, in percent.
    pub reward_change_pct: Option<f64>,
    /// `None` when the baseline rate is zero for some seed.
    pub micro_reduction_pct: Option<Stat>,
    pub macro_reduction_pct: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ComparisonReport {
    pub baseline: String,
    pub rows: Vec<MethodSummary>,
}

impl ComparisonReport {
    pub fn row(&self, method: &str) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// `100 * (1 - rate / baseline)`; `None` when the baseline rate is zero.
pub fn reduction_pct(rate: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (1.0 - rate / baseline))
}

/// Summarizes every method over its seeds and computes violation reductions
/// against `baseline`. Reductions pair runs by seed; a seed missing from the
/// baseline is compared against the baseline's mean rate.
pub fn compare(results: &[MethodResults], baseline: &str) -> Result<ComparisonReport> {
    let base = results
        .iter()
        .find(|r| r.method == baseline)
        .ok_or_else(|| Error::Report(format!("baseline method `{baseline}` missing")))?;
    if base.runs.is_empty() {
        return Err(Error::Report(format!("baseline method `{baseline}` has no successful runs")));
    }
    let col = |runs: &[(u64, EvalResult)], f: fn(&EvalResult) -> f64| -> Vec<f64> {
        runs.iter().map(|(_, r)| f(r)).collect()
    };
    let base_micro = Stat::of(&col(&base.runs, |r| r.micro_violation)).mean;
    let base_macro = Stat::of(&col(&base.runs, |r| r.macro_violation)).mean;
    let base_reward = Stat::of(&col(&base.runs, |r| r.expected_reward)).mean;
    let base_for = |seed: u64, f: fn(&EvalResult) -> f64, fallback: f64| {
        base.runs
            .iter()
            .find(|(s, _)| *s == seed)
            .map_or(fallback, |(_, r)| f(r))
    };

    let mut rows = Vec::with_capacity(results.len());
    for mr in results {
        let stat = |f: fn(&EvalResult) -> f64| Stat::of(&col(&mr.runs, f));
        let reductions = |f: fn(&EvalResult) -> f64, fallback: f64| -> Option<Stat> {
            if mr.runs.is_empty() {
                return None;
            }
            let xs = mr
                .runs
                .iter()
                .map(|(seed, r)| reduction_pct(f(r), base_for(*seed, f, fallback)))
                .collect::<Option<Vec<f64>>>()?;
            Some(Stat::of(&xs))
        };
        let reward = stat(|r| r.expected_reward);
        rows.push(MethodSummary {
            method: mr.method.clone(),
            seeds: mr.runs.len(),
            failed: mr.failed.clone(),
            expected_reward: reward,
            micro_violation: stat(|r| r.micro_violation),
            macro_violation: stat(|r| r.macro_violation),
            replication_rate: stat(|r| r.replication_rate),
            reward_change_pct: (!mr.runs.is_empty() && base_reward != 0.0)
                .then(|| 100.0 * (reward.mean / base_reward - 1.0)),
            micro_reduction_pct: reductions(|r| r.micro_violation, base_micro),
            macro_reduction_pct: reductions(|r| r.macro_violation, base_macro),
        });
    }
    Ok(ComparisonReport {
        baseline: baseline.into(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(reward: f64, micro: f64, macro_rate: f64) -> EvalResult {
        EvalResult {
            expected_reward: reward,
            reward_std_error: 0.0,
            micro_violation: micro,
            macro_violation: macro_rate,
            per_domain_violation: vec![],
            replication_rate: 1.0,
            domain_counts: vec![],
        }
    }

    fn runs(method: &str, rs: Vec<EvalResult>) -> MethodResults {
        MethodResults {
            method: method.into(),
            runs: rs.into_iter().enumerate().map(|(i, r)| (i as u64 + 1, r)).collect(),
            failed: vec![],
        }
    }

    #[test]
    fn reductions_and_stats() {
        let ips = runs("ips", vec![result(0.5, 0.4, 0.8); 4]);
        let half = runs("half", vec![result(0.49, 0.2, 0.4); 4]);
        let rep = compare(&[ips, half], "ips").unwrap();
        let base = rep.row("ips").unwrap();
        assert_eq!(base.macro_reduction_pct.unwrap().mean, 0.0);
        let h = rep.row("half").unwrap();
        assert!((h.macro_reduction_pct.unwrap().mean - 50.0).abs() < 1e-12);
        assert!((h.micro_reduction_pct.unwrap().mean - 50.0).abs() < 1e-12);
        assert!((h.reward_change_pct.unwrap() + 2.0).abs() < 1e-9);
    }

    #[test]
    fn four_seed_mean_std() {
        let rs = [0.1, 0.2, 0.3, 0.4].iter().map(|&x| result(x, x, x)).collect();
        let rep = compare(&[runs("ips", rs)], "ips").unwrap();
        let s = rep.rows[0].expected_reward;
        assert!((s.mean - 0.25).abs() < 1e-12);
        // sample variance: (0.0225 + 0.0025 + 0.0025 + 0.0225) / 3
        assert!((s.std - (0.05f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_baseline_is_not_applicable() {
        let ips = runs("ips", vec![result(0.5, 0.0, 0.0)]);
        let other = runs("q", vec![result(0.5, 0.1, 0.1)]);
        let rep = compare(&[ips, other], "ips").unwrap();
        assert!(rep.row("q").unwrap().macro_reduction_pct.is_none());
        assert_eq!(reduction_pct(0.1, 0.0), None);
    }

    #[test]
    fn missing_baseline() {
        let rep = compare(&[runs("q", vec![result(0.5, 0.1, 0.1)])], "ips");
        assert!(matches!(rep, Err(Error::Report(_))));
    }
}
