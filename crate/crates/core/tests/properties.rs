//! Invariants checked over generated inputs.

mod common;

use common::*;
use ctrlbandit_core::bench::{parse_benchmark, Bounds, ConstraintBenchmark, ConstraintSpec, DomainBounds, Scope};
use ctrlbandit_core::eval::violation_rates_from;
use ctrlbandit_core::gradcore::{Matrix, Tape};
use ctrlbandit_core::objectives::{
    hinge_penalties, ips_batch_loss, meta_loss, quadratic_loss, replication, Batch, DomainPrior, LoggedSample,
    PenaltyWeights, UV_CLAMP,
};
use ctrlbandit_core::policy::sample_index;
use proptest::prelude::*;

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-9;
        v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
    })
}

fn pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| (simplex(n), simplex(n)))
}

proptest! {
    #[test]
    fn replication_is_a_symmetric_probability((p, q) in pair(16)) {
        let r = replication(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r, replication(&q, &p).unwrap());
        prop_assert_eq!(replication(&p, &p).unwrap(), 1.0);
    }

    #[test]
    fn hinges_vanish_exactly_inside_the_bounds(r in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (pmin, pmax) = hinge_penalties(r, lo, hi).unwrap();
        prop_assert!(pmin >= 0.0 && pmax >= 0.0);
        prop_assert!(pmin == 0.0 || pmax == 0.0);
        let inside = lo <= r && r <= hi;
        prop_assert_eq!(inside, pmin == 0.0 && pmax == 0.0);
        prop_assert_eq!(Bounds::new(lo, hi).unwrap().violated_by(r), !inside);
    }

    #[test]
    fn masked_softmax_is_a_simplex(
        logits in prop::collection::vec(-30.0f64..30.0, 1..=16),
        mask_bits in prop::collection::vec(any::<bool>(), 16),
    ) {
        let n = logits.len();
        let mut mask: Vec<bool> = mask_bits[..n].to_vec();
        mask[0] = false;
        let mut t = Tape::new();
        let x = t.constant(Matrix::row(logits));
        let p = t.softmax_rows(x, &mask).unwrap();
        let p = t.value(p).as_slice().to_vec();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pi, m) in p.iter().zip(&mask) {
            prop_assert!(*pi >= 0.0);
            if *m {
                prop_assert_eq!(*pi, 0.0);
            }
        }
    }

    #[test]
    fn propensities_follow_candidate_order(seed in any::<u64>(), n in 1usize..=8, rot in 0usize..8) {
        let mut r = rng(seed);
        let cs = random_candidates(&mut r, n);
        let policy = small_policy(seed);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let p = policy.propensities(&cs).unwrap();
        let q = policy.propensities(&cs.permuted(&perm)).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            prop_assert!((q[i] - p[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_skips_zero_mass(p in simplex(8), zero in 0usize..8, u in 0.0f64..1.0) {
        let mut p = p;
        p[zero] = 0.0;
        let i = sample_index(&p, u);
        prop_assert!(p[i] > 0.0);
    }

    #[test]
    fn clamped_weights_stay_in_range(u in prop::collection::vec(-1e3f64..1e3, 1..6)) {
        let mut pw = PenaltyWeights { v: u.iter().map(|x| -x).collect(), u };
        pw.clamp();
        prop_assert!(pw.u.iter().chain(&pw.v).all(|x| x.abs() <= UV_CLAMP));
    }

    #[test]
    fn zero_weight_quadratic_is_plain_ips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let samples: Vec<LoggedSample> = (0..6).map(|_| random_sample(&mut r, 2)).collect();
        let params = small_policy(seed ^ 1);
        let bounds = DomainBounds::uniform(2, Bounds::new(0.95, 0.99).unwrap());
        let batch = Batch::new(samples.iter().collect(), &bounds).unwrap();
        let a = quadratic_loss(&batch, &params, 0.0).unwrap().gradients().unwrap();
        let b = ips_batch_loss(&batch, &params).unwrap().gradients().unwrap();
        prop_assert_eq!(a.loss, b.loss);
        prop_assert_eq!(a.params, b.params);
    }

    #[test]
    fn pure_constraint_meta_loss_ignores_rewards(seed in any::<u64>()) {
        let mut r = rng(seed);
        let samples: Vec<LoggedSample> = (0..6).map(|_| random_sample(&mut r, 2)).collect();
        let flipped: Vec<LoggedSample> = samples.iter().map(|s| s.with_reward(1.0 - s.reward()).unwrap()).collect();
        let params = small_policy(seed ^ 2);
        let bounds = DomainBounds::uniform(2, Bounds::new(0.9, 0.97).unwrap());
        let prior = DomainPrior::new(vec![0.3, 0.7]).unwrap();
        let a = meta_loss(&Batch::new(samples.iter().collect(), &bounds).unwrap(), &params, &prior, 1.0)
            .unwrap().gradients().unwrap();
        let b = meta_loss(&Batch::new(flipped.iter().collect(), &bounds).unwrap(), &params, &prior, 1.0)
            .unwrap().gradients().unwrap();
        prop_assert_eq!(a.loss, b.loss);
        prop_assert_eq!(a.params, b.params);
    }

    #[test]
    fn micro_rate_ignores_domain_labels(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let samples: Vec<LoggedSample> = (0..n).map(|_| random_sample(&mut r, 3)).collect();
        let reps: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).fract()).collect();
        let b = [
            Bounds::new(0.2, 0.9).unwrap(),
            Bounds::new(0.5, 1.0).unwrap(),
            Bounds::new(0.0, 0.6).unwrap(),
        ];
        // Relabel k -> (k + 1) mod 3 and move the bounds along.
        let relabeled: Vec<LoggedSample> = samples.iter().map(|s| {
            LoggedSample::new(s.candidates().clone(), s.p0().to_vec(), s.action(), s.reward(), (s.domain() + 1) % 3).unwrap()
        }).collect();
        let a = violation_rates_from(&samples, &reps, &DomainBounds(b.to_vec())).unwrap();
        let c = violation_rates_from(&relabeled, &reps, &DomainBounds(vec![b[2], b[0], b[1]])).unwrap();
        prop_assert_eq!(a.micro_rate, c.micro_rate);
        prop_assert!((a.macro_rate - c.macro_rate).abs() < 1e-12);
    }

    #[test]
    fn macro_rate_ignores_duplication(seed in any::<u64>(), n in 1usize..40, dup in 0usize..3, times in 1usize..4) {
        let mut r = rng(seed);
        let samples: Vec<LoggedSample> = (0..n).map(|_| random_sample(&mut r, 3)).collect();
        let reps: Vec<f64> = (0..n).map(|i| (i as f64 * 0.61).fract()).collect();
        let bounds = DomainBounds(vec![Bounds::new(0.3, 0.8).unwrap(); 3]);
        let mut s2 = samples.clone();
        let mut r2 = reps.clone();
        for (s, &x) in samples.iter().zip(&reps) {
            if s.domain() == dup {
                for _ in 0..times {
                    s2.push(s.clone());
                    r2.push(x);
                }
            }
        }
        let a = violation_rates_from(&samples, &reps, &bounds).unwrap();
        let b = violation_rates_from(&s2, &r2, &bounds).unwrap();
        prop_assert!((a.macro_rate - b.macro_rate).abs() < 1e-12);
    }

    #[test]
    fn benchmark_text_round_trips(
        bounds in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 0..5),
        default in prop::option::of((0.0f64..=1.0, 0.0f64..=1.0)),
        desc in "[ -~]{0,20}",
    ) {
        let mut specs: Vec<ConstraintSpec> = bounds.iter().enumerate().map(|(i, &(a, b))| ConstraintSpec {
            description: desc.clone(),
            scope: Scope::Domain(format!("dom_{i}")),
            bounds: Bounds::new(a.min(b), a.max(b)).unwrap(),
        }).collect();
        if let Some((a, b)) = default {
            specs.push(ConstraintSpec {
                description: String::new(),
                scope: Scope::Default,
                bounds: Bounds::new(a.min(b), a.max(b)).unwrap(),
            });
        }
        let bench = ConstraintBenchmark::new("prop", specs).unwrap();
        let back = parse_benchmark(&bench.to_text()).unwrap();
        prop_assert_eq!(back, bench);
    }

    #[test]
    fn prior_from_samples_is_a_distribution(seed in any::<u64>(), n in 0usize..30, m in 1usize..6) {
        let mut r = rng(seed);
        let samples: Vec<LoggedSample> = (0..n).map(|_| random_sample(&mut r, m)).collect();
        let p = DomainPrior::from_samples(&samples, m).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.as_slice().iter().all(|&x| x > 0.0));
    }
}

#[test]
fn disjoint_support_never_replicates() {
    assert_eq!(replication(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(replication(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.25, 0.75]).unwrap(), 0.0);
}
