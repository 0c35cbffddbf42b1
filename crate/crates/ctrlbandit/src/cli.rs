//! Command-line interface.
//!
//! Every option can also come from a JSON config file (`--config`), keyed by
//! the long flag name with underscores; flags win over the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ctrlbandit_core::bench::{builtin_benchmark, ConstraintBenchmark};
use ctrlbandit_core::eval::evaluate;
use ctrlbandit_core::synthenv::{gen_dataset, gen_env, EnvSpec, Split, DEFAULT_FRACTIONS};
use ctrlbandit_core::trainers::Method;
use serde::Deserialize;

use crate::formats::{self, EvalFile};
use crate::runner::{
    collect_report, run_benchmark, run_dir, run_one, split_file, write_run, BenchmarkConfig, ExperimentData, Hyper,
    Init, RunOptions,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CTRLBANDIT_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "ctrlbandit", version, about = "Constrained off-policy bandit training and evaluation")]
pub struct Cli {
    /// JSON file with default option values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic environment and its train/validation/test logs.
    GenData(GenDataArgs),
    /// Train one method for one or more seeds.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and compare several methods over several seeds.
    Benchmark(BenchmarkArgs),
    /// Rebuild a comparison report from finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory [default: <out root>/data].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Environment seed [default: 7].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Logged samples across all splits [default: 200000].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Number of domains [default: 8].
    #[arg(long)]
    pub domains: Option<usize>,
    /// Zipf exponent of the domain frequencies [default: 1.1].
    #[arg(long)]
    pub zipf: Option<f64>,
    /// Logging-policy softmax temperature [default: 0.6].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Fewest candidates per decision [default: 2].
    #[arg(long)]
    pub min_candidates: Option<usize>,
    /// Most candidates per decision [default: 8].
    #[arg(long)]
    pub max_candidates: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainingFlags {
    /// Directory holding env.json and the split files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Built-in benchmark name or path to a benchmark file.
    #[arg(long)]
    pub benchmark: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Epoch cap [default: 32].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size [default: 256].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop after this many epochs without a better validation checkpoint.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Starting policy [default: logging].
    #[arg(long, value_enum)]
    pub init: Option<Init>,
    /// Keep a trace record every this many iterations [default: 10].
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Quadratic penalty weight.
    #[arg(long)]
    pub w: Option<f64>,
    /// Minimax max-player learning rate.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Minimax learning-rate decay.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Minimax update period.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Minimax period decay.
    #[arg(long)]
    pub xi: Option<f64>,
    /// Meta-gradient inner step size.
    #[arg(long)]
    pub eta_inner: Option<f64>,
    /// Meta-loss balance between reward and constraints.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Policy learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Penalty-weight learning rate of the meta-gradient method.
    #[arg(long)]
    pub uv_lr: Option<f64>,
    /// Output root [default: $CTRLBANDIT_OUT or ./runs].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run name; runs go to <out>/<name>/<method>/<seed> [default: benchmark name].
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// ips, quadratic, minimax or metagrad.
    #[arg(long)]
    pub method: Option<String>,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Comma-separated methods [default: all four].
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Sweep quadratic and minimax hyperparameters on the first seed.
    #[arg(long)]
    pub sweep: bool,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train` or `benchmark`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file, or a directory holding the split files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Built-in benchmark name or path to a benchmark file.
    #[arg(long)]
    pub benchmark: Option<String>,
    /// train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output file [default: eval_<split>.json next to the checkpoint].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory (<out>/<name>).
    #[arg(long)]
    pub run: PathBuf,
    /// Method the reductions are measured against.
    #[arg(long, default_value = "ips")]
    pub baseline: String,
}

/// Option values read from `--config`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub env: Option<EnvSpec>,
    pub samples: Option<usize>,
    pub data: Option<PathBuf>,
    pub benchmark: Option<String>,
    pub method: Option<String>,
    pub methods: Option<Vec<String>>,
    pub sweep: Option<bool>,
    pub seeds: Option<Vec<u64>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub init: Option<Init>,
    pub log_every: Option<u64>,
    pub w: Option<f64>,
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub xi: Option<f64>,
    pub eta_inner: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub uv_lr: Option<f64>,
    pub out: Option<PathBuf>,
    pub name: Option<String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = formats::read_file(path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills every unset flag from the file.
    fn merge_into(&self, f: &mut TrainingFlags) {
        macro_rules! fill {
            ($($field:ident),*) => { $( if f.$field.is_none() { f.$field = self.$field.clone(); } )* };
        }
        fill!(data, benchmark, seeds, epochs, batch_size, patience, init, log_every, w, eta, gamma, tau, xi, eta_inner, lambda, lr, uv_lr, out, name);
    }
}

/// Resolves a built-in benchmark name or a benchmark file path.
pub fn resolve_benchmark(name_or_path: &str) -> anyhow::Result<ConstraintBenchmark> {
    if let Some(b) = builtin_benchmark(name_or_path) {
        return Ok(b);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return Ok(formats::read_benchmark(path)?);
    }
    bail!("unknown benchmark `{name_or_path}` (built-ins: global, critical, explore)")
}

pub fn out_root(flag: Option<&PathBuf>) -> PathBuf {
    flag.cloned()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn parse_method(s: &str) -> anyhow::Result<Method> {
    Method::parse(s).with_context(|| format!("unknown method `{s}` (ips, quadratic, minimax, metagrad)"))
}

struct Resolved {
    data: ExperimentData,
    bench: ConstraintBenchmark,
    seeds: Vec<u64>,
    hyper: Hyper,
    options: RunOptions,
    root: PathBuf,
}

fn resolve(f: &TrainingFlags) -> anyhow::Result<Resolved> {
    let data_dir = f.data.clone().context("--data is required")?;
    let bench = resolve_benchmark(f.benchmark.as_deref().context("--benchmark is required")?)?;
    let data = ExperimentData::load(&data_dir)?;
    let mut hyper = Hyper::for_benchmark(bench.name());
    macro_rules! set {
        ($($flag:ident => $($path:ident).+),*) => { $( if let Some(x) = f.$flag { hyper.$($path).+ = x; } )* };
    }
    set!(w => w, eta => minimax.eta, gamma => minimax.gamma, tau => minimax.tau, xi => minimax.xi,
         eta_inner => metagrad.eta_inner, lambda => metagrad.lambda, lr => lr, uv_lr => uv_lr);
    let d = RunOptions::default();
    let options = RunOptions {
        epochs: f.epochs.unwrap_or(d.epochs),
        batch_size: f.batch_size.unwrap_or(d.batch_size),
        patience: f.patience.or(d.patience),
        init: f.init.unwrap_or(d.init),
        log_every: f.log_every.unwrap_or(d.log_every),
    };
    let name = f.name.clone().unwrap_or_else(|| bench.name().to_string());
    Ok(Resolved {
        data,
        seeds: f.seeds.clone().unwrap_or_else(|| vec![1]),
        hyper,
        options,
        root: out_root(f.out.as_ref()).join(name),
        bench,
    })
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a, &config),
        Command::Train(a) => cmd_train(a, &config),
        Command::Eval(a) => cmd_eval(a, &config),
        Command::Benchmark(a) => cmd_benchmark(a, &config),
        Command::Report(a) => cmd_report(a),
    }
}

pub fn cmd_gen_data(a: GenDataArgs, config: &ConfigFile) -> anyhow::Result<()> {
    let mut spec = config.env.clone().unwrap_or_default();
    if let Some(x) = a.seed {
        spec.seed = x;
    }
    if let Some(x) = a.domains {
        spec.num_domains = x;
    }
    if let Some(x) = a.zipf {
        spec.zipf_exponent = x;
    }
    if let Some(x) = a.temperature {
        spec.temperature = x;
    }
    if let Some(x) = a.min_candidates {
        spec.min_candidates = x;
    }
    if let Some(x) = a.max_candidates {
        spec.max_candidates = x;
    }
    let n = a.samples.or(config.samples).unwrap_or(200_000);
    let out = a.out.unwrap_or_else(|| out_root(config.out.as_ref()).join("data"));
    let env = gen_env(&spec)?;
    let splits = gen_dataset(&env, n, DEFAULT_FRACTIONS)?;
    formats::write_env(&out.join("env.json"), &env)?;
    for ds in [&splits.train, &splits.validation, &splits.test] {
        formats::write_dataset(&out.join(split_file(ds.split)), ds)?;
    }
    println!(
        "wrote {} (train {}, validation {}, test {}; fingerprint {})",
        out.display(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        env.fingerprint()
    );
    Ok(())
}

pub fn cmd_train(a: TrainArgs, config: &ConfigFile) -> anyhow::Result<()> {
    let mut flags = a.flags;
    config.merge_into(&mut flags);
    let method = parse_method(a.method.as_deref().or(config.method.as_deref()).context("--method is required")?)?;
    let r = resolve(&flags)?;
    r.hyper.validate(method)?;
    let mut failures = 0;
    for &seed in &r.seeds {
        let dir = run_dir(&r.root, method, seed);
        match run_one(&r.data, &r.bench, method, &r.hyper, seed, &r.options) {
            Ok(o) => {
                write_run(&dir, &r.data, &r.bench, &r.options, &o)?;
                println!(
                    "{} seed {seed}: best epoch {} of {}, validation macro violation {:.4}, reward {:.4} -> {}",
                    method.name(),
                    o.best_epoch,
                    o.report.epochs_run,
                    o.validation.macro_violation,
                    o.validation.expected_reward,
                    dir.display()
                );
            }
            Err(e) => {
                eprintln!("error: {} seed {seed}: {e:#}", method.name());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} runs failed", r.seeds.len());
    }
    Ok(())
}

pub fn cmd_eval(a: EvalArgs, config: &ConfigFile) -> anyhow::Result<()> {
    let split = Split::parse(&a.split).with_context(|| format!("unknown split `{}`", a.split))?;
    let data_path = a.data.or_else(|| config.data.clone()).context("--data is required")?;
    let bench = resolve_benchmark(
        a.benchmark
            .as_deref()
            .or(config.benchmark.as_deref())
            .context("--benchmark is required")?,
    )?;
    let ckpt = formats::read_checkpoint(&a.checkpoint)?;
    let file = if data_path.is_dir() {
        data_path.join(split_file(split))
    } else {
        data_path
    };
    let ds = formats::read_dataset(&file)?;
    if ds.is_empty() {
        bail!("{} has no samples", file.display());
    }
    let mismatch = ckpt.fingerprint != ds.fingerprint;
    if mismatch {
        eprintln!(
            "warning: checkpoint was trained on environment {} but the data comes from {}",
            ckpt.fingerprint, ds.fingerprint
        );
    }
    let bounds = bench.resolve_all(&ds.domain_names);
    let result = evaluate(&ds.samples, &ckpt.params, &bounds)?;
    let out = a.out.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}.json", split.name()))
    });
    let ef = EvalFile {
        benchmark: bench.name().into(),
        split: ds.split,
        samples: ds.len(),
        domains: ds.domain_names.clone(),
        checkpoint_fingerprint: ckpt.fingerprint,
        data_fingerprint: ds.fingerprint,
        fingerprint_mismatch: mismatch,
        result,
    };
    formats::write_eval(&out, &ef)?;
    println!(
        "reward {:.6} (se {:.6}), micro violation {:.6}, macro violation {:.6}, replication {:.6} -> {}",
        ef.result.expected_reward,
        ef.result.reward_std_error,
        ef.result.micro_violation,
        ef.result.macro_violation,
        ef.result.replication_rate,
        out.display()
    );
    Ok(())
}

pub fn cmd_benchmark(a: BenchmarkArgs, config: &ConfigFile) -> anyhow::Result<()> {
    let mut flags = a.flags;
    config.merge_into(&mut flags);
    let methods = match a.methods.or_else(|| config.methods.clone()) {
        Some(ms) => ms.iter().map(|m| parse_method(m)).collect::<anyhow::Result<Vec<_>>>()?,
        None => Method::ALL.to_vec(),
    };
    let mut r = resolve(&flags)?;
    if flags.seeds.is_none() {
        r.seeds = vec![1, 2, 3, 4];
    }
    let mut methods_with_baseline = methods.clone();
    if !methods.contains(&Method::Ips) {
        methods_with_baseline.insert(0, Method::Ips);
    }
    let cfg = BenchmarkConfig {
        methods: methods_with_baseline,
        seeds: r.seeds.clone(),
        sweep: a.sweep || config.sweep.unwrap_or(false),
        hyper: r.hyper,
        options: r.options,
        baseline: Method::Ips,
    };
    let outcome = run_benchmark(&r.data, &r.bench, &cfg, Some(&r.root), |msg| eprintln!("{msg}"))?;
    print!("{}", formats::report_csv(&outcome.report));
    if outcome.any_failed() {
        bail!("some runs failed; see the manifests under {}", r.root.display());
    }
    Ok(())
}

pub fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let report = collect_report(&a.run, &a.baseline)?;
    formats::write_report(&a.run, &report)?;
    print!("{}", formats::report_csv(&report));
    if report.rows.iter().any(|r| !r.failed.is_empty()) {
        bail!("report includes failed runs");
    }
    Ok(())
}
