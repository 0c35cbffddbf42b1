#![allow(dead_code)]

use ctrlbandit_core::bench::{Bounds, DomainBounds};
use ctrlbandit_core::objectives::{replication, LoggedSample};
use ctrlbandit_core::policy::{init_policy, CandidateSet, PolicyParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CTX: usize = 2;
pub const CAND: usize = 2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn random_candidates(rng: &mut ChaCha8Rng, n: usize) -> CandidateSet {
    let ctx = (0..CTX).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let cands = (0..n)
        .map(|_| (0..CAND).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect();
    CandidateSet::new(ctx, cands).unwrap()
}

pub fn random_sample(rng: &mut ChaCha8Rng, domains: usize) -> LoggedSample {
    let n = rng.gen_range(2..=4);
    let cs = random_candidates(rng, n);
    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p0 = softmax(&z);
    let action = rng.gen_range(0..n);
    let reward = if rng.gen_bool(0.6) { 1.0 } else { 0.0 };
    LoggedSample::new(cs, p0, action, reward, rng.gen_range(0..domains)).unwrap()
}

/// Small policy: (CTX + CAND) -> hidden -> 1, well under 100 parameters.
pub fn small_policy(seed: u64) -> PolicyParams {
    let mut p = init_policy(seed, &[CTX + CAND, 6, 1]).unwrap();
    // Non-zero biases so their gradients are exercised.
    let mut r = rng(seed ^ 99);
    let mut flat = p.to_flat();
    for x in flat.iter_mut() {
        *x += r.gen_range(-0.3..0.3);
    }
    p.set_flat(&flat);
    p
}

/// Per-domain bounds chosen so that some hinges are active and no sample sits
/// within `margin` of a kink.
pub fn bounds_away_from_kinks(
    rng: &mut ChaCha8Rng,
    samples: &[LoggedSample],
    params: &[&PolicyParams],
    domains: usize,
    margin: f64,
) -> Option<DomainBounds> {
    let reps: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            samples
                .iter()
                .map(|s| replication(&p.propensities(s.candidates()).unwrap(), s.p0()).unwrap())
                .collect()
        })
        .collect();
    for _ in 0..200 {
        let b: Vec<Bounds> = (0..domains)
            .map(|_| {
                let lo = rng.gen_range(0.3..0.95);
                let hi = rng.gen_range(lo..1.0);
                Bounds::new(lo, hi).unwrap()
            })
            .collect();
        let ok = reps.iter().all(|rs| {
            samples.iter().zip(rs).all(|(s, &r)| {
                let bd = b[s.domain()];
                (r - bd.c_min).abs() > margin && (r - bd.c_max).abs() > margin
            })
        });
        let active = reps[0]
            .iter()
            .zip(samples)
            .any(|(&r, s)| b[s.domain()].violated_by(r));
        if ok && active {
            return Some(DomainBounds(b));
        }
    }
    None
}

/// `|a - b| <= rel * max(|a|, |b|)`, with a tiny absolute floor for values
/// that are zero up to rounding.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-9
}
