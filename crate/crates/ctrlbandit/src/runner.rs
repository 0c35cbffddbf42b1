//! Experiment runner: one training run with validation-based checkpoint
//! selection, hyperparameter sweeps, and the multi-method, multi-seed
//! benchmark that produces a comparison report.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use ctrlbandit_core::bench::{ConstraintBenchmark, DomainBounds};
use ctrlbandit_core::eval::{compare, evaluate, ComparisonReport, EvalResult, MethodResults};
use ctrlbandit_core::objectives::{DomainPrior, PenaltyWeights};
use ctrlbandit_core::optim::OptimizerConfig;
use ctrlbandit_core::policy::{init_policy, PolicyParams};
use ctrlbandit_core::synthenv::{Dataset, Split};
use ctrlbandit_core::trainers::{
    best_checkpoint, train_ips, train_metagrad, train_minimax, train_quadratic, CheckpointScore, EpochObserver,
    Flow, MetaGradConfig, Method, MinimaxConfig, TrainData, TrainOptions, TrainReport,
};
use serde::{Deserialize, Serialize};

use crate::formats::{self, Checkpoint, EnvFile};

/// Quadratic-penalty sweep values.
pub const QUADRATIC_GRID: [f64; 5] = [0.1, 1.0, 10.0, 100.0, 1000.0];
/// Minimax sweep: learning rate.
pub const MINIMAX_ETA_GRID: [f64; 3] = [1.0, 0.1, 0.01];
/// Minimax sweep: learning-rate decay.
pub const MINIMAX_GAMMA_GRID: [f64; 3] = [1.0, 0.999, 0.995];

/// Starting point of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Copy of the logging policy stored with the environment.
    Logging,
    /// Fresh Glorot initialization from the run seed.
    Random,
}

/// Method hyperparameters; only the fields of the selected method are used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub w: f64,
    pub minimax: MinimaxConfig,
    pub metagrad: MetaGradConfig,
    /// Policy optimizer learning rate (Adam).
    pub lr: f64,
    /// Penalty-weight optimizer learning rate (Adam) for the meta-gradient
    /// method.
    pub uv_lr: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self::for_benchmark("global")
    }
}

impl Hyper {
    /// Per-benchmark defaults; unknown benchmarks get the `global` values.
    pub fn for_benchmark(name: &str) -> Self {
        let (w, eta, gamma) = match name {
            "critical" => (1000.0, 0.1, 0.999),
            "explore" => (1000.0, 1.0, 1.0),
            _ => (10.0, 0.1, 1.0),
        };
        Self {
            w,
            minimax: MinimaxConfig {
                eta,
                gamma,
                ..MinimaxConfig::default()
            },
            metagrad: MetaGradConfig::default(),
            lr: 1e-3,
            uv_lr: 1e-2,
        }
    }

    pub fn validate(&self, method: Method) -> anyhow::Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("learning rate must be > 0");
        }
        match method {
            Method::Ips => {}
            Method::Quadratic => {
                if !(self.w >= 0.0 && self.w.is_finite()) {
                    bail!("quadratic weight must be >= 0");
                }
            }
            Method::Minimax => self.minimax.validate()?,
            Method::Metagrad => {
                self.metagrad.validate()?;
                if !(self.uv_lr > 0.0 && self.uv_lr.is_finite()) {
                    bail!("penalty-weight learning rate must be > 0");
                }
            }
        }
        Ok(())
    }

    /// The hyperparameters that matter for `method`, as `key=value` text.
    pub fn describe(&self, method: Method) -> String {
        match method {
            Method::Ips => format!("lr={}", self.lr),
            Method::Quadratic => format!("w={} lr={}", self.w, self.lr),
            Method::Minimax => format!(
                "eta={} gamma={} tau={} xi={} lr={}",
                self.minimax.eta, self.minimax.gamma, self.minimax.tau, self.minimax.xi, self.lr
            ),
            Method::Metagrad => format!(
                "lambda={} eta_inner={} lr={} uv_lr={}",
                self.metagrad.lambda, self.metagrad.eta_inner, self.lr, self.uv_lr
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a new best validation checkpoint.
    pub patience: Option<usize>,
    pub init: Init,
    pub log_every: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            epochs: 32,
            batch_size: 256,
            patience: None,
            init: Init::Logging,
            log_every: 10,
        }
    }
}

/// Train, validation and (optionally) test splits plus their environment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub env: Option<EnvFile>,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
}

impl ExperimentData {
    pub fn new(env: Option<EnvFile>, train: Dataset, validation: Dataset, test: Option<Dataset>) -> anyhow::Result<Self> {
        for ds in std::iter::once(&validation).chain(test.as_ref()) {
            if ds.domain_names != train.domain_names {
                bail!("{} split has different domains than the train split", ds.split.name());
            }
            if ds.fingerprint != train.fingerprint {
                bail!("{} split comes from a different environment", ds.split.name());
            }
        }
        if let Some(env) = &env {
            if env.fingerprint != train.fingerprint {
                bail!("environment file does not match the datasets");
            }
        }
        Ok(Self {
            env,
            train,
            validation,
            test,
        })
    }

    /// Reads `env.json`, `train.jsonl`, `validation.jsonl` and, if present,
    /// `test.jsonl` from `dir`.
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let env_path = dir.join("env.json");
        let env = if env_path.exists() {
            Some(formats::read_env(&env_path)?)
        } else {
            None
        };
        let train = formats::read_dataset(&dir.join(split_file(Split::Train)))?;
        let validation = formats::read_dataset(&dir.join(split_file(Split::Validation)))?;
        let test_path = dir.join(split_file(Split::Test));
        let test = if test_path.exists() {
            Some(formats::read_dataset(&test_path)?)
        } else {
            None
        };
        Self::new(env, train, validation, test)
    }

    pub fn domains(&self) -> &[String] {
        &self.train.domain_names
    }

    pub fn fingerprint(&self) -> &str {
        &self.train.fingerprint
    }

    pub fn input_dim(&self) -> anyhow::Result<usize> {
        if let Some(env) = &self.env {
            return Ok(env.spec.input_dim());
        }
        self.train
            .samples
            .first()
            .map(|s| s.candidates().input_dim())
            .ok_or_else(|| anyhow!("training split is empty"))
    }
}

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

/// Early stopping and best-checkpoint tracking on validation data.
struct ValidationTracker<'a> {
    validation: &'a Dataset,
    bounds: &'a DomainBounds,
    patience: Option<usize>,
    scores: Vec<CheckpointScore>,
    best: Option<(usize, PolicyParams, EvalResult)>,
    since_best: usize,
}

impl EpochObserver for ValidationTracker<'_> {
    fn on_epoch(&mut self, epoch: usize, params: &PolicyParams, _: &PenaltyWeights) -> ctrlbandit_core::Result<Flow> {
        let e = evaluate(&self.validation.samples, params, self.bounds)?;
        self.scores.push(CheckpointScore {
            epoch,
            macro_violation: e.macro_violation,
            expected_reward: e.expected_reward,
        });
        if best_checkpoint(&self.scores) == Some(self.scores.len() - 1) {
            self.best = Some((epoch, params.clone(), e));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(match self.patience {
            Some(p) if self.since_best >= p => Flow::Stop,
            _ => Flow::Continue,
        })
    }
}

/// One finished training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub hyper: Hyper,
    pub best_epoch: usize,
    pub params: PolicyParams,
    pub report: TrainReport,
    pub epoch_scores: Vec<CheckpointScore>,
    pub validation: EvalResult,
    pub test: Option<EvalResult>,
}

impl RunOutcome {
    pub fn score(&self) -> CheckpointScore {
        CheckpointScore {
            epoch: self.best_epoch,
            macro_violation: self.validation.macro_violation,
            expected_reward: self.validation.expected_reward,
        }
    }
}

pub fn initial_params(data: &ExperimentData, init: Init, seed: u64) -> anyhow::Result<PolicyParams> {
    match init {
        Init::Logging => data
            .env
            .as_ref()
            .map(|e| e.logging_policy.clone())
            .ok_or_else(|| anyhow!("logging-policy start needs env.json next to the datasets")),
        Init::Random => {
            let d = data.input_dim()?;
            Ok(init_policy(seed, &[d, 32, 32, 1])?)
        }
    }
}

/// Trains one method with one seed and keeps the epoch checkpoint with the
/// lowest validation macro violation rate (ties: higher reward, then earlier
/// epoch).
pub fn run_one(
    data: &ExperimentData,
    bench: &ConstraintBenchmark,
    method: Method,
    hyper: &Hyper,
    seed: u64,
    opts: &RunOptions,
) -> anyhow::Result<RunOutcome> {
    hyper.validate(method)?;
    if opts.epochs == 0 {
        bail!("epochs must be >= 1");
    }
    if data.validation.is_empty() {
        bail!("validation split is empty");
    }
    let bounds = bench.resolve_all(data.domains());
    let params = initial_params(data, opts.init, seed)?;
    let train_opts = TrainOptions {
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        seed,
        log_every: opts.log_every,
    };
    let mut tracker = ValidationTracker {
        validation: &data.validation,
        bounds: &bounds,
        patience: opts.patience,
        scores: Vec::new(),
        best: None,
        since_best: 0,
    };
    let td = TrainData::new(&data.train.samples, &bounds);
    let theta_opt = OptimizerConfig::adam_with_lr(hyper.lr);
    let (_, report) = match method {
        Method::Ips => train_ips(td, params, theta_opt, train_opts, &mut tracker),
        Method::Quadratic => train_quadratic(td, params, theta_opt, hyper.w, train_opts, &mut tracker),
        Method::Minimax => train_minimax(td, params, theta_opt, hyper.minimax, train_opts, &mut tracker),
        Method::Metagrad => {
            let prior = DomainPrior::from_samples(&data.train.samples, bounds.len())?;
            train_metagrad(
                td,
                params,
                theta_opt,
                OptimizerConfig::adam_with_lr(hyper.uv_lr),
                hyper.metagrad,
                &prior,
                train_opts,
                &mut tracker,
            )
        }
    }
    .with_context(|| format!("{} seed {seed}", method.name()))?;
    let (best_epoch, params, validation) = tracker.best.ok_or_else(|| anyhow!("no epoch completed"))?;
    let test = match &data.test {
        Some(t) if !t.is_empty() => Some(evaluate(&t.samples, &params, &bounds)?),
        _ => None,
    };
    Ok(RunOutcome {
        method,
        seed,
        hyper: *hyper,
        best_epoch,
        params,
        report,
        epoch_scores: tracker.scores,
        validation,
        test,
    })
}

/// Record of one run as written to `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub method: Method,
    pub seed: u64,
    pub benchmark: String,
    pub fingerprint: String,
    pub domains: Vec<String>,
    pub status: RunStatus,
    pub hyper: Hyper,
    pub options: RunOptions,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub iterations: Option<u64>,
    pub epoch_scores: Vec<EpochScore>,
    pub validation: Option<EvalResult>,
    pub test: Option<EvalResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochScore {
    pub epoch: usize,
    pub macro_violation: f64,
    pub expected_reward: f64,
}

/// `<root>/<method>/<seed>`.
pub fn run_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join(method.name()).join(seed.to_string())
}

/// Writes `manifest.json`, `checkpoint.json` and `train_log.csv`.
pub fn write_run(
    dir: &Path,
    data: &ExperimentData,
    bench: &ConstraintBenchmark,
    opts: &RunOptions,
    outcome: &RunOutcome,
) -> anyhow::Result<()> {
    let ckpt = Checkpoint::new(
        data.fingerprint(),
        data.domains(),
        outcome.method.name(),
        outcome.seed,
        outcome.best_epoch,
        outcome.params.clone(),
    );
    formats::write_checkpoint(&dir.join("checkpoint.json"), &ckpt)?;
    formats::write_file(&dir.join("train_log.csv"), formats::train_log_csv(&outcome.report).as_bytes())?;
    let manifest = Manifest {
        method: outcome.method,
        seed: outcome.seed,
        benchmark: bench.name().into(),
        fingerprint: data.fingerprint().into(),
        domains: data.domains().to_vec(),
        status: RunStatus::Ok,
        hyper: outcome.hyper,
        options: *opts,
        best_epoch: Some(outcome.best_epoch),
        epochs_run: Some(outcome.report.epochs_run),
        iterations: Some(outcome.report.iterations),
        epoch_scores: outcome
            .epoch_scores
            .iter()
            .map(|s| EpochScore {
                epoch: s.epoch,
                macro_violation: s.macro_violation,
                expected_reward: s.expected_reward,
            })
            .collect(),
        validation: Some(outcome.validation.clone()),
        test: outcome.test.clone(),
        error: None,
    };
    formats::write_json_file(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_failure(
    dir: &Path,
    data: &ExperimentData,
    bench: &ConstraintBenchmark,
    opts: &RunOptions,
    method: Method,
    seed: u64,
    hyper: &Hyper,
    err: &anyhow::Error,
) -> anyhow::Result<()> {
    let manifest = Manifest {
        method,
        seed,
        benchmark: bench.name().into(),
        fingerprint: data.fingerprint().into(),
        domains: data.domains().to_vec(),
        status: RunStatus::Failed,
        hyper: *hyper,
        options: *opts,
        best_epoch: None,
        epochs_run: None,
        iterations: None,
        epoch_scores: Vec::new(),
        validation: None,
        test: None,
        error: Some(format!("{err:#}")),
    };
    formats::write_json_file(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

/// One entry of a hyperparameter sweep.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub hyper: Hyper,
    pub outcome: Result<RunOutcome, String>,
}

/// Index of the sweep entry whose selected checkpoint scores best on
/// validation (same rule as checkpoint selection; ties go to the earlier
/// grid point).
pub fn best_sweep_entry(entries: &[SweepEntry]) -> Option<usize> {
    let ok: Vec<(usize, CheckpointScore)> = entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.outcome.as_ref().ok().map(|o| (i, o.score())))
        .collect();
    // Grid position replaces the epoch as the final tie-breaker.
    let scores: Vec<CheckpointScore> = ok
        .iter()
        .map(|(i, s)| CheckpointScore { epoch: *i, ..*s })
        .collect();
    best_checkpoint(&scores).map(|j| ok[j].0)
}

/// Grid of hyperparameters searched for `method`; empty when the method is
/// not swept.
pub fn sweep_grid(method: Method, base: &Hyper) -> Vec<Hyper> {
    match method {
        Method::Quadratic => QUADRATIC_GRID.iter().map(|&w| Hyper { w, ..*base }).collect(),
        Method::Minimax => MINIMAX_ETA_GRID
            .iter()
            .flat_map(|&eta| {
                MINIMAX_GAMMA_GRID.iter().map(move |&gamma| Hyper {
                    minimax: MinimaxConfig {
                        eta,
                        gamma,
                        ..base.minimax
                    },
                    ..*base
                })
            })
            .collect(),
        _ => Vec::new(),
    }
}

pub fn sweep(
    data: &ExperimentData,
    bench: &ConstraintBenchmark,
    method: Method,
    base: &Hyper,
    seed: u64,
    opts: &RunOptions,
) -> Vec<SweepEntry> {
    sweep_grid(method, base)
        .into_iter()
        .map(|hyper| SweepEntry {
            outcome: run_one(data, bench, method, &hyper, seed, opts).map_err(|e| format!("{e:#}")),
            hyper,
        })
        .collect()
}

pub fn sweep_csv(method: Method, entries: &[SweepEntry], chosen: Option<usize>) -> String {
    let mut out = String::from("method,hyper,status,best_epoch,val_macro_viol,val_reward,chosen\n");
    for (i, e) in entries.iter().enumerate() {
        let (status, epoch, mv, rw) = match &e.outcome {
            Ok(o) => (
                "ok",
                o.best_epoch.to_string(),
                format!("{:.6}", o.validation.macro_violation),
                format!("{:.6}", o.validation.expected_reward),
            ),
            Err(_) => ("failed", String::new(), String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{status},{epoch},{mv},{rw},{}\n",
            method.name(),
            e.hyper.describe(method),
            chosen == Some(i)
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Sweep quadratic and minimax hyperparameters on the first seed before
    /// the multi-seed runs.
    pub sweep: bool,
    pub hyper: Hyper,
    pub options: RunOptions,
    pub baseline: Method,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub report: ComparisonReport,
    pub chosen: Vec<(Method, Hyper)>,
    pub sweeps: Vec<(Method, Vec<SweepEntry>, Option<usize>)>,
    pub runs: Vec<(Method, u64, Result<RunOutcome, String>)>,
}

impl BenchmarkOutcome {
    pub fn any_failed(&self) -> bool {
        self.runs.iter().any(|(_, _, r)| r.is_err())
    }

    pub fn hyper_of(&self, method: Method) -> Option<&Hyper> {
        self.chosen.iter().find(|(m, _)| *m == method).map(|(_, h)| h)
    }

    pub fn outcomes(&self, method: Method) -> impl Iterator<Item = &RunOutcome> {
        self.runs
            .iter()
            .filter(move |(m, _, _)| *m == method)
            .filter_map(|(_, _, r)| r.as_ref().ok())
    }
}

/// Trains every method on every seed, evaluates on the test split and
/// compares against the baseline. With `out` set, each run is written to
/// `<out>/<method>/<seed>/` and the report to `<out>/report.{csv,json}`.
pub fn run_benchmark(
    data: &ExperimentData,
    bench: &ConstraintBenchmark,
    cfg: &BenchmarkConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> anyhow::Result<BenchmarkOutcome> {
    if cfg.seeds.is_empty() {
        bail!("no seeds given");
    }
    if cfg.methods.is_empty() {
        bail!("no methods given");
    }
    match &data.test {
        Some(t) if !t.is_empty() => {}
        _ => bail!("benchmark needs a non-empty test split"),
    }
    let mut chosen = Vec::new();
    let mut sweeps = Vec::new();
    for &method in &cfg.methods {
        let mut hyper = cfg.hyper;
        if cfg.sweep && !sweep_grid(method, &cfg.hyper).is_empty() {
            progress(&format!("sweep {} on seed {}", method.name(), cfg.seeds[0]));
            let entries = sweep(data, bench, method, &cfg.hyper, cfg.seeds[0], &cfg.options);
            let best = best_sweep_entry(&entries);
            if let Some(i) = best {
                hyper = entries[i].hyper;
            }
            if let Some(dir) = out {
                formats::write_file(
                    &dir.join(format!("sweep_{}.csv", method.name())),
                    sweep_csv(method, &entries, best).as_bytes(),
                )?;
            }
            sweeps.push((method, entries, best));
        }
        chosen.push((method, hyper));
    }

    let mut runs = Vec::new();
    let mut results = Vec::new();
    for &(method, hyper) in &chosen {
        let mut mr = MethodResults {
            method: method.name().into(),
            runs: Vec::new(),
            failed: Vec::new(),
        };
        for &seed in &cfg.seeds {
            progress(&format!("train {} seed {seed} ({})", method.name(), hyper.describe(method)));
            let r = run_one(data, bench, method, &hyper, seed, &cfg.options);
            if let Some(root) = out {
                let dir = run_dir(root, method, seed);
                match &r {
                    Ok(o) => write_run(&dir, data, bench, &cfg.options, o)?,
                    Err(e) => write_failure(&dir, data, bench, &cfg.options, method, seed, &hyper, e)?,
                }
            }
            match r {
                Ok(o) => {
                    mr.runs.push((seed, o.test.clone().expect("test split checked above")));
                    runs.push((method, seed, Ok(o)));
                }
                Err(e) => {
                    mr.failed.push(seed);
                    runs.push((method, seed, Err(format!("{e:#}"))));
                }
            }
        }
        results.push(mr);
    }
    let report = compare(&results, cfg.baseline.name())?;
    if let Some(dir) = out {
        formats::write_report(dir, &report)?;
    }
    Ok(BenchmarkOutcome {
        report,
        chosen,
        sweeps,
        runs,
    })
}

/// Rebuilds the comparison report from the manifests under `root`
/// (`<root>/<method>/<seed>/manifest.json`).
pub fn collect_report(root: &Path, baseline: &str) -> anyhow::Result<ComparisonReport> {
    let mut results: Vec<MethodResults> = Vec::new();
    let mut method_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    method_dirs.sort_by_key(|p| {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        (Method::parse(&name).map_or(usize::MAX, |m| m as usize), name)
    });
    for mdir in method_dirs {
        let mut seed_dirs: Vec<(u64, PathBuf)> = std::fs::read_dir(&mdir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").exists())
            .filter_map(|p| {
                let seed = p.file_name()?.to_str()?.parse().ok()?;
                Some((seed, p))
            })
            .collect();
        if seed_dirs.is_empty() {
            continue;
        }
        seed_dirs.sort();
        let mut mr = MethodResults {
            method: String::new(),
            runs: Vec::new(),
            failed: Vec::new(),
        };
        for (seed, dir) in seed_dirs {
            let m: Manifest = formats::read_json_file(&dir.join("manifest.json"))?;
            mr.method = m.method.name().into();
            match (m.status, m.test) {
                (RunStatus::Ok, Some(t)) => mr.runs.push((seed, t)),
                (RunStatus::Ok, None) => bail!("{}: run has no test evaluation", dir.display()),
                (RunStatus::Failed, _) => mr.failed.push(seed),
            }
        }
        results.push(mr);
    }
    Ok(compare(&results, baseline)?)
}
