//! Sampling distributions, environment oracles and metric arithmetic checked
//! against independent computations.

mod common;

use common::*;
use ctrlbandit_core::bench::{builtin_benchmark, Bounds, DomainBounds};
use ctrlbandit_core::eval::{evaluate, expected_reward, replication_rate, replications, violation_rates, violation_rates_from};
use ctrlbandit_core::math::sigmoid;
use ctrlbandit_core::objectives::{replication, LoggedSample};
use ctrlbandit_core::policy::{init_policy, sample_index, PolicyParams};
use ctrlbandit_core::synthenv::{
    gen_dataset, gen_env, true_policy_value, true_replication_profile, zipf_prior, EnvSpec, RewardModel,
    DEFAULT_FRACTIONS,
};
use rand::Rng;

fn small_env(m: usize) -> EnvSpec {
    EnvSpec {
        num_domains: m,
        ..EnvSpec::default()
    }
}

#[test]
fn glorot_init_moments() {
    let p = init_policy(3, &[24, 32, 32, 1]).unwrap();
    let w = p.layers()[1].weights.as_slice();
    let n = w.len() as f64;
    let var = 2.0 / 64.0;
    let mean = w.iter().sum::<f64>() / n;
    assert!(mean.abs() < 4.0 * (var / n).sqrt(), "mean {mean}");
    let m2 = w.iter().map(|x| x * x).sum::<f64>() / n;
    // Var of x^2 for U(-a, a) is 4a^4/45.
    let a2 = 3.0 * var;
    let sd = (4.0 * a2 * a2 / 45.0 / n).sqrt();
    assert!((m2 - var).abs() < 4.0 * sd, "second moment {m2} vs {var}");
    assert!(p.layers().iter().all(|l| l.bias.as_slice().iter().all(|&b| b == 0.0)));
}

#[test]
fn inverse_cdf_sampling_matches_the_multinomial() {
    let p = [0.05, 0.4, 0.0, 0.25, 0.3];
    let n = 100_000;
    let mut r = rng(5);
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[sample_index(&p, r.gen::<f64>())] += 1;
    }
    for (c, &pk) in counts.iter().zip(&p) {
        let expect = n as f64 * pk;
        let sd = (n as f64 * pk * (1.0 - pk)).sqrt();
        assert!((*c as f64 - expect).abs() <= 3.0 * sd, "{c} vs {expect}");
    }
}

#[test]
fn domain_frequencies_follow_the_prior() {
    let env = gen_env(&EnvSpec::default()).unwrap();
    let s = gen_dataset(&env, 100_000, [1.0, 0.0, 0.0]).unwrap();
    let n = s.train.len() as f64;
    for (k, &pk) in env.prior().iter().enumerate() {
        let c = s.train.samples.iter().filter(|x| x.domain() == k).count() as f64;
        let sd = (n * pk * (1.0 - pk)).sqrt();
        assert!((c - n * pk).abs() <= 3.0 * sd, "domain {k}: {c} vs {}", n * pk);
    }
}

#[test]
fn zipf_prior_skew() {
    let p = zipf_prior(27, 1.1);
    let (hi, lo) = (p[0], p[26]);
    assert!(hi >= 10.0 * lo);
    // Direct computation of the ratio.
    assert!((hi / lo - 27f64.powf(1.1)).abs() < 1e-9);
}

#[test]
fn dataset_contract() {
    let env = gen_env(&small_env(4)).unwrap();
    let s = gen_dataset(&env, 2000, DEFAULT_FRACTIONS).unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1700, 200, 100));
    for ds in [&s.train, &s.validation, &s.test] {
        for x in &ds.samples {
            assert!(x.p0()[x.action()] >= 1e-4);
            assert!(x.reward() == 0.0 || x.reward() == 1.0);
            assert_eq!(env.logging_policy().propensities(x.candidates()).unwrap(), x.p0());
        }
    }
    // Splits are consecutive index ranges of one log.
    let whole = gen_dataset(&env, 2000, [1.0, 0.0, 0.0]).unwrap().train.samples;
    let joined: Vec<LoggedSample> = s.train.samples.iter().chain(&s.validation.samples).chain(&s.test.samples).cloned().collect();
    assert_eq!(joined, whole);
}

#[test]
fn certain_success_has_value_one() {
    let spec = EnvSpec {
        reward: RewardModel {
            bias: 1000.0,
            scale: 0.3,
            alignment: 0.9,
        },
        ..small_env(2)
    };
    let env = gen_env(&spec).unwrap();
    let (v, se) = true_policy_value(&env, env.logging_policy(), 500, 3).unwrap();
    assert_eq!(v, 1.0);
    assert!(se < 1e-12);
}

fn uniform_policy(input: usize) -> PolicyParams {
    let mut p = init_policy(0, &[input, 32, 32, 1]).unwrap();
    p.scale_output(0.0);
    p
}

#[test]
fn uniform_policy_value_by_enumeration() {
    let spec = EnvSpec {
        min_candidates: 2,
        max_candidates: 2,
        ..small_env(3)
    };
    let env = gen_env(&spec).unwrap();
    let uniform = uniform_policy(spec.input_dim());
    let n = 300;
    let (v, _) = true_policy_value(&env, &uniform, n, 11).unwrap();
    let mut total = 0.0;
    for i in 0..n as u64 {
        let d = env.oracle_draw(11, i).unwrap();
        let s = env.success_probabilities(&d.candidates).unwrap();
        total += (s[0] + s[1]) / 2.0;
    }
    assert!((v - total / n as f64).abs() < 1e-12);
}

#[test]
fn success_probability_is_logistic_in_the_scores() {
    let spec = EnvSpec {
        reward: RewardModel {
            alignment: 1.0,
            ..EnvSpec::default().reward
        },
        ..small_env(2)
    };
    let env = gen_env(&spec).unwrap();
    let d = env.oracle_draw(0, 0).unwrap();
    let s = env.success_probabilities(&d.candidates).unwrap();
    // Logging scores are the untempered scores over the temperature.
    let mut base = env.logging_policy().clone();
    base.scale_output(spec.temperature);
    let x = ctrlbandit_core::policy::StackedCandidates::new(&[&d.candidates]).unwrap();
    let s0 = base.scores(&x.x).unwrap();
    assert!(s.iter().all(|&p| p > 0.0 && p < 1.0));
    for (p, z) in s.iter().zip(s0.as_slice()) {
        assert!((p - sigmoid(spec.reward.bias + spec.reward.scale * z)).abs() < 1e-12);
    }
}

#[test]
fn replication_profile_oracle() {
    let env = gen_env(&small_env(3)).unwrap();
    let same = true_replication_profile(&env, env.logging_policy(), 400, 1).unwrap();
    for k in 0..3 {
        if same.count[k] > 0 {
            assert_eq!(same.mean[k], 1.0);
        }
    }
    let other = init_policy(42, &env.spec().policy_dims()).unwrap();
    let prof = true_replication_profile(&env, &other, 4000, 2).unwrap();
    let data = gen_dataset(&env, 20_000, [1.0, 0.0, 0.0]).unwrap().train.samples;
    let reps = replications(&data, &other).unwrap();
    for k in 0..3 {
        assert!(prof.mean[k] > 0.0 && prof.mean[k] < 1.0);
        let xs: Vec<f64> = data.iter().zip(&reps).filter(|(s, _)| s.domain() == k).map(|(_, r)| *r).collect();
        let (m, sd) = ctrlbandit_core::math::mean_std(&xs);
        let se = (sd * sd / xs.len() as f64 + prof.std_error[k].powi(2)).sqrt();
        assert!((m - prof.mean[k]).abs() <= 4.0 * se, "domain {k}: {m} vs {}", prof.mean[k]);
    }
}

fn hand_sample(domain: usize) -> LoggedSample {
    let mut r = rng(domain as u64);
    let cs = random_candidates(&mut r, 2);
    LoggedSample::new(cs, vec![0.5, 0.5], 0, 1.0, domain).unwrap()
}

#[test]
fn violation_rate_arithmetic() {
    let bounds = DomainBounds(vec![Bounds::new(0.9, 1.0).unwrap(); 2]);
    // A: 1 of 2 violating, B: 0 of 2.
    let s: Vec<LoggedSample> = [0, 0, 1, 1].iter().map(|&d| hand_sample(d)).collect();
    let v = violation_rates_from(&s, &[0.5, 0.95, 1.0, 0.9], &bounds).unwrap();
    assert_eq!((v.micro_rate, v.macro_rate), (0.25, 0.25));
    // A: 1 of 1, B: 0 of 3.
    let s: Vec<LoggedSample> = [0, 1, 1, 1].iter().map(|&d| hand_sample(d)).collect();
    let v = violation_rates_from(&s, &[0.5, 0.95, 1.0, 0.9], &bounds).unwrap();
    assert_eq!((v.micro_rate, v.macro_rate), (0.25, 0.5));
    // Everything violating.
    let v = violation_rates_from(&s, &[0.1; 4], &bounds).unwrap();
    assert_eq!((v.micro_rate, v.macro_rate), (1.0, 1.0));
    // Absent domains are left out of the macro mean.
    let three = DomainBounds(vec![Bounds::new(0.9, 1.0).unwrap(); 3]);
    let v = violation_rates_from(&s, &[0.5, 0.95, 1.0, 0.9], &three).unwrap();
    assert_eq!(v.per_domain[2], None);
    assert_eq!(v.macro_rate, 0.5);
}

#[test]
fn replication_hand_case() {
    assert!((replication(&[0.6, 0.4], &[0.8, 0.2]).unwrap() - 0.8).abs() < 1e-15);
}

#[test]
fn logging_policy_metrics_are_exact() {
    let env = gen_env(&small_env(4)).unwrap();
    let s = gen_dataset(&env, 3000, DEFAULT_FRACTIONS).unwrap();
    let data = &s.train.samples;
    let global = builtin_benchmark("global").unwrap().resolve_all(env.domain_names());
    let (r, _) = expected_reward(data, env.logging_policy()).unwrap();
    assert_eq!(r, s.train.mean_reward());
    assert_eq!(replication_rate(data, env.logging_policy()).unwrap(), 1.0);
    let v = violation_rates(data, env.logging_policy(), &global).unwrap();
    assert_eq!((v.micro_rate, v.macro_rate), (0.0, 0.0));
    for name in ["critical", "explore"] {
        let b = builtin_benchmark(name).unwrap().resolve_all(env.domain_names());
        let e = evaluate(data, env.logging_policy(), &b).unwrap();
        assert_eq!(e.replication_rate, 1.0);
    }
    let zeros: Vec<LoggedSample> = data.iter().map(|x| x.with_reward(0.0).unwrap()).collect();
    assert_eq!(expected_reward(&zeros, env.logging_policy()).unwrap().0, 0.0);
}

#[test]
fn default_temperature_keeps_propensities_above_a_thousandth() {
    for seed in 1..=4 {
        let env = gen_env(&EnvSpec {
            seed,
            ..EnvSpec::default()
        })
        .unwrap();
        let s = gen_dataset(&env, 20_000, DEFAULT_FRACTIONS).unwrap();
        let min = s
            .train
            .samples
            .iter()
            .flat_map(|x| x.p0().iter().copied())
            .fold(1.0, f64::min);
        assert!(min >= 1e-3, "seed {seed}: min propensity {min}");
    }
}

#[test]
fn context_noise_is_standard_normal() {
    let env = gen_env(&EnvSpec {
        num_domains: 1,
        domain_shift: 0.0,
        ..EnvSpec::default()
    })
    .unwrap();
    let mut r = rng(31);
    let xs: Vec<f64> = (0..20_000)
        .flat_map(|_| env.draw(&mut r).unwrap().candidates.context().to_vec())
        .collect();
    let n = xs.len() as f64;
    let m1 = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| x * x).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| x.powi(4)).sum::<f64>() / n;
    // Standard errors of the sample moments of N(0, 1): 1, sqrt(2), sqrt(96).
    assert!(m1.abs() < 4.0 / n.sqrt(), "mean {m1}");
    assert!((m2 - 1.0).abs() < 4.0 * 2f64.sqrt() / n.sqrt(), "variance {m2}");
    assert!((m4 - 3.0).abs() < 4.0 * 96f64.sqrt() / n.sqrt(), "fourth moment {m4}");
}

/// FNV-1a over the bit patterns of every number in the samples.
fn digest(samples: &[LoggedSample]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |x: u64| {
        h ^= x;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    for s in samples {
        s.candidates().context().iter().for_each(|x| eat(x.to_bits()));
        s.candidates().candidates().iter().flatten().for_each(|x| eat(x.to_bits()));
        s.p0().iter().for_each(|x| eat(x.to_bits()));
        eat(s.action() as u64);
        eat(s.reward().to_bits());
        eat(s.domain() as u64);
    }
    h
}

/// The same value is checked against the CLI's output in the std crate, so a
/// build whose float backend differs is caught.
#[test]
fn default_log_is_pinned() {
    let env = gen_env(&EnvSpec::default()).unwrap();
    let s = gen_dataset(&env, 200, DEFAULT_FRACTIONS).unwrap();
    assert_eq!(format!("{:016x}", digest(&s.train.samples)), "4b5f7b29f36beea9");
}
