//! Synthetic logged-bandit environment.
//!
//! An [`Environment`] is a deterministic function of its [`EnvSpec`]: a
//! Zipfian domain prior, per-domain context offsets, a logging policy and a
//! hidden logistic reward model. Sample `i` draws all of its randomness from a
//! ChaCha stream keyed by `(seed, i)`, so generation order does not matter.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcore::Matrix;
use crate::math;
use crate::objectives::{replication, LoggedSample, PROPENSITY_FLOOR};
use crate::policy::{init_policy, sample_index, CandidateSet, PolicyParams, StackedCandidates, N_MAX};

const SALT_ENV: u64 = 0x5eed_0001;
const SALT_SAMPLE: u64 = 0x5eed_0002;
const SALT_ORACLE: u64 = 0x5eed_0003;
const HIDDEN: usize = 32;

const DOMAIN_NAMES: [&str; 8] = [
    "music",
    "knowledge",
    "shopping",
    "weather",
    "home_automation",
    "notifications",
    "books",
    "video",
];

/// Hidden success model: `sigmoid(bias + scale * (alignment * s0 + (1 - alignment) * s1))`
/// where `s0` is the logging policy's untempered score and `s1` an independent
/// random scorer.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardModel {
    pub bias: f64,
    pub scale: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvSpec {
    pub seed: u64,
    pub num_domains: usize,
    pub zipf_exponent: f64,
    pub context_dim: usize,
    pub candidate_dim: usize,
    pub min_candidates: usize,
    pub max_candidates: usize,
    /// Scale of the per-domain context offset.
    pub domain_shift: f64,
    /// Logging-policy softmax temperature.
    pub temperature: f64,
    pub reward: RewardModel,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_domains: 8,
            zipf_exponent: 1.1,
            context_dim: 16,
            candidate_dim: 8,
            min_candidates: 2,
            max_candidates: 8,
            domain_shift: 1.0,
            temperature: 0.6,
            reward: RewardModel {
                bias: 0.0,
                scale: 0.2,
                alignment: 0.9,
            },
        }
    }
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("environment needs at least one domain"));
        }
        if self.context_dim == 0 || self.candidate_dim == 0 {
            return Err(Error::config("feature dimensions must be positive"));
        }
        if self.min_candidates == 0 || self.min_candidates > self.max_candidates || self.max_candidates > N_MAX {
            return Err(Error::config(format!(
                "candidate range must satisfy 1 <= min <= max <= {N_MAX}"
            )));
        }
        let finite = [
            self.zipf_exponent,
            self.domain_shift,
            self.temperature,
            self.reward.bias,
            self.reward.scale,
            self.reward.alignment,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("environment parameters must be finite"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be > 0"));
        }
        if self.zipf_exponent < 0.0 {
            return Err(Error::config("zipf exponent must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.reward.alignment) {
            return Err(Error::config("reward alignment must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Scorer input width.
    pub fn input_dim(&self) -> usize {
        self.context_dim + self.candidate_dim
    }

    /// Policy layer sizes matching this environment's features.
    pub fn policy_dims(&self) -> Vec<usize> {
        vec![self.input_dim(), HIDDEN, HIDDEN, 1]
    }

    /// Hex SHA-256 over every field; identifies the environment a dataset or
    /// checkpoint came from.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"ctrlbandit-env-v1");
        for x in [
            self.seed,
            self.num_domains as u64,
            self.context_dim as u64,
            self.candidate_dim as u64,
            self.min_candidates as u64,
            self.max_candidates as u64,
        ] {
            h.update(x.to_le_bytes());
        }
        for x in [
            self.zipf_exponent,
            self.domain_shift,
            self.temperature,
            self.reward.bias,
            self.reward.scale,
            self.reward.alignment,
        ] {
            h.update(x.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Domain display names: a fixed list, then `domain_NN`.
pub fn domain_names(m: usize) -> Vec<String> {
    (0..m)
        .map(|k| match DOMAIN_NAMES.get(k) {
            Some(name) => String::from(*name),
            None => format!("domain_{k:02}"),
        })
        .collect()
}

/// `p_k` proportional to `(k + 1)^-s`.
pub fn zipf_prior(m: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..m).map(|k| math::powf((k + 1) as f64, -s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvSpec,
    prior: Vec<f64>,
    names: Vec<String>,
    offsets: Vec<Vec<f64>>,
    /// Untempered logging scorer (`s0`).
    base: PolicyParams,
    /// Logging policy: `base` with outputs divided by the temperature.
    logging: PolicyParams,
    aux: PolicyParams,
    fingerprint: String,
}

pub fn gen_env(spec: &EnvSpec) -> Result<Environment> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ SALT_ENV);
    let dims = spec.policy_dims();
    let base = init_policy(rng.gen(), &dims)?;
    let aux = init_policy(rng.gen(), &dims)?;
    let mut logging = base.clone();
    logging.scale_output(1.0 / spec.temperature);
    let offsets = (0..spec.num_domains)
        .map(|_| {
            (0..spec.context_dim)
                .map(|_| spec.domain_shift * standard_normal(&mut rng))
                .collect()
        })
        .collect();
    Ok(Environment {
        prior: zipf_prior(spec.num_domains, spec.zipf_exponent),
        names: domain_names(spec.num_domains),
        offsets,
        base,
        logging,
        aux,
        fingerprint: spec.fingerprint(),
        spec: spec.clone(),
    })
}

/// Marsaglia polar method on the crate's own `ln`/`sqrt`, so a seed maps to
/// the same bits whichever float backend the rest of the build links.
fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u = 2.0 * rng.gen::<f64>() - 1.0;
        let v = 2.0 * rng.gen::<f64>() - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * math::sqrt(-2.0 * math::ln(s) / s);
        }
    }
}

/// One drawn decision before the action is taken.
#[derive(Debug, Clone)]
pub struct Draw {
    pub domain: usize,
    pub candidates: CandidateSet,
}

impl Environment {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn domain_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_domains(&self) -> usize {
        self.spec.num_domains
    }

    pub fn logging_policy(&self) -> &PolicyParams {
        &self.logging
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Draws a domain, a context and a candidate set.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Draw> {
        let domain = sample_index(&self.prior, rng.gen::<f64>());
        let context = self.offsets[domain]
            .iter()
            .map(|o| o + standard_normal(rng))
            .collect();
        let n = rng.gen_range(self.spec.min_candidates..=self.spec.max_candidates);
        let candidates = (0..n)
            .map(|_| {
                (0..self.spec.candidate_dim)
                    .map(|_| standard_normal(rng))
                    .collect()
            })
            .collect();
        Ok(Draw {
            domain,
            candidates: CandidateSet::new(context, candidates)?,
        })
    }

    /// Exact success probability of every candidate.
    pub fn success_probabilities(&self, cs: &CandidateSet) -> Result<Vec<f64>> {
        let stacked = StackedCandidates::new(&[cs])?;
        let s0 = self.base.scores(&stacked.x)?;
        let s1 = self.aux.scores(&stacked.x)?;
        Ok(self.success_from_scores(&s0, &s1))
    }

    fn success_from_scores(&self, s0: &Matrix, s1: &Matrix) -> Vec<f64> {
        let r = self.spec.reward;
        s0.as_slice()
            .iter()
            .zip(s1.as_slice())
            .map(|(a, b)| math::sigmoid(r.bias + r.scale * (r.alignment * a + (1.0 - r.alignment) * b)))
            .collect()
    }

    fn sample_rng(&self, salt: u64, i: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ salt);
        rng.set_stream(i);
        rng
    }

    /// Draw `i` of the oracle stream keyed by `seed`; independent of the
    /// logged samples.
    pub fn oracle_draw(&self, seed: u64, i: u64) -> Result<Draw> {
        let mut rng = self.sample_rng(SALT_ORACLE ^ seed.rotate_left(17), i);
        self.draw(&mut rng)
    }

    /// Logged sample `i`: draw, logging propensities, logged action and
    /// Bernoulli reward.
    pub fn logged_sample(&self, i: u64) -> Result<LoggedSample> {
        let mut rng = self.sample_rng(SALT_SAMPLE, i);
        let d = self.draw(&mut rng)?;
        let p0 = self.logging.propensities(&d.candidates)?;
        let low = p0.iter().cloned().fold(f64::INFINITY, f64::min);
        if low < PROPENSITY_FLOOR {
            return Err(Error::config(format!(
                "logging propensity {low:e} below floor {PROPENSITY_FLOOR:e} (sample {i}); raise the temperature"
            )));
        }
        let action = sample_index(&p0, rng.gen::<f64>());
        let success = self.success_probabilities(&d.candidates)?;
        let reward = if rng.gen::<f64>() < success[action] { 1.0 } else { 0.0 };
        LoggedSample::new(d.candidates, p0, action, reward, d.domain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub fingerprint: String,
    pub domain_names: Vec<String>,
    pub samples: Vec<LoggedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn mean_reward(&self) -> f64 {
        self.samples.iter().map(|s| s.reward()).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

/// The three splits of one generated log.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// 85 / 10 / 5.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.85, 0.10, 0.05];

/// Sizes of the train and validation splits (the test split takes the rest).
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must be in [0, 1] and sum to 1"));
    }
    let train = (n as f64 * fractions[0]) as usize;
    let validation = ((n as f64 * fractions[1]) as usize).min(n - train);
    Ok([train, validation, n - train - validation])
}

/// Generates `n` logged samples and cuts them, in index order, into train,
/// validation and test splits.
pub fn gen_dataset(env: &Environment, n: usize, fractions: [f64; 3]) -> Result<Splits> {
    let sizes = split_sizes(n, fractions)?;
    let mut samples = (0..n as u64).map(|i| env.logged_sample(i));
    let mut take = |split: Split, k: usize| -> Result<Dataset> {
        Ok(Dataset {
            split,
            fingerprint: env.fingerprint.clone(),
            domain_names: env.names.clone(),
            samples: samples.by_ref().take(k).collect::<Result<_>>()?,
        })
    };
    Ok(Splits {
        train: take(Split::Train, sizes[0])?,
        validation: take(Split::Validation, sizes[1])?,
        test: take(Split::Test, sizes[2])?,
    })
}

/// Mean and standard error.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let (m, sd) = math::mean_std(xs);
    (m, sd / math::sqrt(xs.len().max(1) as f64))
}

/// Ground-truth value of a policy on `n_mc` fresh draws.
///
/// For every draw the expected success over the policy's action distribution
/// is computed exactly; the Monte Carlo error comes from the contexts only.
/// Returns `(mean, standard error)`.
pub fn true_policy_value(env: &Environment, params: &PolicyParams, n_mc: usize, seed: u64) -> Result<(f64, f64)> {
    if n_mc == 0 {
        return Err(Error::config("n_mc must be >= 1"));
    }
    let mut values = Vec::with_capacity(n_mc);
    for i in 0..n_mc as u64 {
        let d = env.oracle_draw(seed, i)?;
        let p = params.propensities(&d.candidates)?;
        let s = env.success_probabilities(&d.candidates)?;
        values.push(p.iter().zip(&s).map(|(a, b)| a * b).sum());
    }
    Ok(mean_se(&values))
}

/// Per-domain mean replication against the logging policy on fresh draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationProfile {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub count: Vec<usize>,
}

pub fn true_replication_profile(
    env: &Environment,
    params: &PolicyParams,
    n_mc: usize,
    seed: u64,
) -> Result<ReplicationProfile> {
    if n_mc == 0 {
        return Err(Error::config("n_mc must be >= 1"));
    }
    let m = env.num_domains();
    let mut by_domain: Vec<Vec<f64>> = vec![Vec::new(); m];
    for i in 0..n_mc as u64 {
        let d = env.oracle_draw(seed, i)?;
        let p = params.propensities(&d.candidates)?;
        let p0 = env.logging.propensities(&d.candidates)?;
        by_domain[d.domain].push(replication(&p, &p0)?);
    }
    let mut out = ReplicationProfile {
        mean: vec![0.0; m],
        std_error: vec![0.0; m],
        count: vec![0; m],
    };
    for (k, xs) in by_domain.iter().enumerate() {
        let (mu, se) = mean_se(xs);
        out.mean[k] = mu;
        out.std_error[k] = se;
        out.count[k] = xs.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EnvSpec {
        EnvSpec {
            num_domains: 3,
            ..EnvSpec::default()
        }
    }

    #[test]
    fn deterministic_and_fingerprinted() {
        let a = gen_env(&small()).unwrap();
        let b = gen_env(&small()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.logged_sample(5).unwrap(), b.logged_sample(5).unwrap());
        let other = EnvSpec { seed: 8, ..small() };
        assert_ne!(other.fingerprint(), a.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn single_domain() {
        let env = gen_env(&EnvSpec { num_domains: 1, ..EnvSpec::default() }).unwrap();
        assert_eq!(env.prior(), &[1.0]);
        let s = gen_dataset(&env, 50, DEFAULT_FRACTIONS).unwrap();
        assert!(s.train.samples.iter().all(|x| x.domain() == 0));
    }

    #[test]
    fn zipf_is_skewed() {
        let p = zipf_prior(27, 1.1);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] >= 10.0 * p[26]);
    }

    #[test]
    fn split_sizes_follow_fractions() {
        assert_eq!(split_sizes(200_000, DEFAULT_FRACTIONS).unwrap(), [170_000, 20_000, 10_000]);
        assert_eq!(split_sizes(0, DEFAULT_FRACTIONS).unwrap(), [0, 0, 0]);
        assert!(split_sizes(10, [0.5, 0.5, 0.5]).is_err());
        let env = gen_env(&small()).unwrap();
        let s = gen_dataset(&env, 0, DEFAULT_FRACTIONS).unwrap();
        assert!(s.train.is_empty() && s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn low_temperature_violates_floor() {
        let env = gen_env(&EnvSpec { temperature: 1e-4, ..small() }).unwrap();
        let err = (0..20).find_map(|i| env.logged_sample(i).err());
        assert!(matches!(err, Some(Error::Config(_))));
    }

    #[test]
    fn logged_propensities_reproduce() {
        let env = gen_env(&small()).unwrap();
        for i in 0..20 {
            let s = env.logged_sample(i).unwrap();
            let p = env.logging_policy().propensities(s.candidates()).unwrap();
            assert_eq!(p.as_slice(), s.p0());
            assert!(s.p0()[s.action()] >= PROPENSITY_FLOOR);
        }
    }

    #[test]
    fn logging_policy_replicates_itself() {
        let env = gen_env(&small()).unwrap();
        let prof = true_replication_profile(&env, env.logging_policy(), 200, 1).unwrap();
        for k in 0..3 {
            if prof.count[k] > 0 {
                assert_eq!(prof.mean[k], 1.0);
            }
        }
    }
}
