//! On-disk formats: datasets (JSON lines), environment and checkpoint files
//! (JSON), benchmark files, training traces and comparison reports (CSV and
//! JSON).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ctrlbandit_core::bench::{parse_benchmark, ConstraintBenchmark};
use ctrlbandit_core::eval::{ComparisonReport, EvalResult, Stat};
use ctrlbandit_core::objectives::LoggedSample;
use ctrlbandit_core::policy::{CandidateSet, PolicyParams};
use ctrlbandit_core::synthenv::{Dataset, EnvSpec, Environment, Split};
use ctrlbandit_core::trainers::TrainReport;
use serde::{Deserialize, Serialize};

pub const DATASET_FORMAT: &str = "ctrlbandit-dataset";
pub const ENV_FORMAT: &str = "ctrlbandit-env";
pub const CHECKPOINT_FORMAT: &str = "ctrlbandit-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn invalid(path: &Path, msg: impl std::fmt::Display) -> FormatError {
    FormatError::Invalid {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    Ok(())
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| invalid(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|e| FormatError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    split: Split,
    fingerprint: String,
    domains: Vec<String>,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    context: Vec<f64>,
    candidates: Vec<Vec<f64>>,
    p0: Vec<f64>,
    action: usize,
    reward: f64,
    domain: String,
}

/// One header line followed by one sample per line.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        split: ds.split,
        fingerprint: ds.fingerprint.clone(),
        domains: ds.domain_names.clone(),
        count: ds.samples.len(),
    };
    put_line(&mut w, path, &header)?;
    for s in &ds.samples {
        let rec = SampleRecord {
            context: s.candidates().context().to_vec(),
            candidates: s.candidates().candidates().to_vec(),
            p0: s.p0().to_vec(),
            action: s.action(),
            reward: s.reward(),
            domain: ds.domain_names[s.domain()].clone(),
        };
        put_line(&mut w, path, &rec)?;
    }
    w.flush().map_err(io_err(path))
}

fn put_line<W: Write, T: Serialize>(w: &mut W, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| invalid(path, e))?;
    w.write_all(b"\n").map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let perr = |line: usize, msg: String| FormatError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let first = lines
        .next()
        .ok_or_else(|| perr(1, "missing header line".into()))?
        .map_err(io_err(path))?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| perr(1, e.to_string()))?;
    if header.format != DATASET_FORMAT || header.version != FORMAT_VERSION {
        return Err(perr(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| perr(no, e.to_string()))?;
        let domain = header
            .domains
            .iter()
            .position(|d| *d == rec.domain)
            .ok_or_else(|| perr(no, format!("unknown domain `{}`", rec.domain)))?;
        let cs = CandidateSet::new(rec.context, rec.candidates).map_err(|e| perr(no, e.to_string()))?;
        let s = LoggedSample::new(cs, rec.p0, rec.action, rec.reward, domain).map_err(|e| perr(no, e.to_string()))?;
        samples.push(s);
    }
    if samples.len() != header.count {
        return Err(invalid(
            path,
            format!("header declares {} samples, found {}", header.count, samples.len()),
        ));
    }
    Ok(Dataset {
        split: header.split,
        fingerprint: header.fingerprint,
        domain_names: header.domains,
        samples,
    })
}

/// Environment file: the spec it regenerates from, its fingerprint, and the
/// logging-policy checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvFile {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub domains: Vec<String>,
    pub prior: Vec<f64>,
    pub spec: EnvSpec,
    pub logging_policy: PolicyParams,
}

impl EnvFile {
    pub fn from_env(env: &Environment) -> Self {
        Self {
            format: ENV_FORMAT.into(),
            version: FORMAT_VERSION,
            fingerprint: env.fingerprint().into(),
            domains: env.domain_names().to_vec(),
            prior: env.prior().to_vec(),
            spec: env.spec().clone(),
            logging_policy: env.logging_policy().clone(),
        }
    }
}

pub fn write_env(path: &Path, env: &Environment) -> Result<()> {
    write_json(path, &EnvFile::from_env(env))
}

pub fn read_env(path: &Path) -> Result<EnvFile> {
    let f: EnvFile = read_json(path)?;
    if f.format != ENV_FORMAT {
        return Err(invalid(path, format!("not an environment file ({})", f.format)));
    }
    if f.spec.fingerprint() != f.fingerprint {
        return Err(invalid(path, "fingerprint does not match the stored spec"));
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Fingerprint of the environment the training data came from.
    pub fingerprint: String,
    pub domains: Vec<String>,
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(fingerprint: &str, domains: &[String], method: &str, seed: u64, epoch: usize, params: PolicyParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            fingerprint: fingerprint.into(),
            domains: domains.to_vec(),
            method: method.into(),
            seed,
            epoch,
            params,
        }
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_json(path, ckpt)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c: Checkpoint = read_json(path)?;
    if c.format != CHECKPOINT_FORMAT {
        return Err(invalid(path, format!("not a checkpoint file ({})", c.format)));
    }
    Ok(c)
}

pub fn read_benchmark(path: &Path) -> Result<ConstraintBenchmark> {
    let text = read_file(path)?;
    parse_benchmark(&text).map_err(|e| invalid(path, e))
}

pub fn write_benchmark(path: &Path, bench: &ConstraintBenchmark) -> Result<()> {
    write_file(path, bench.to_text().as_bytes())
}

/// Shortest round-trip float text.
fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Trace CSV: `iteration,epoch,loss,reward,micro_viol,macro_viol,u_0..,v_0..`.
pub fn train_log_csv(report: &TrainReport) -> String {
    let m = report.final_weights.len();
    let mut out = String::from("iteration,epoch,loss,reward,micro_viol,macro_viol");
    for k in 0..m {
        let _ = write!(out, ",u_{k}");
    }
    for k in 0..m {
        let _ = write!(out, ",v_{k}");
    }
    out.push('\n');
    for r in &report.records {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.iteration,
            r.epoch,
            num(r.loss),
            num(r.reward),
            num(r.micro_violation),
            num(r.macro_violation)
        );
        for x in r.u.iter().chain(&r.v) {
            let _ = write!(out, ",{}", num(*x));
        }
        out.push('\n');
    }
    out
}

/// Iteration with its `u` and `v` columns.
pub type TraceRow = (u64, Vec<f64>, Vec<f64>);

/// Parses the trace CSV back into `(iteration, u, v)` rows.
pub fn parse_train_log(text: &str) -> std::result::Result<Vec<TraceRow>, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty trace")?.split(',').collect();
    let m = header.iter().filter(|h| h.starts_with("u_")).count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 + 2 * m {
            return Err(format!("row {}: expected {} columns", i + 2, 6 + 2 * m));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 2));
        let it = cells[0].parse::<u64>().map_err(|e| format!("row {}: {e}", i + 2))?;
        let u = cells[6..6 + m].iter().map(|s| f(s)).collect::<std::result::Result<_, _>>()?;
        let v = cells[6 + m..].iter().map(|s| f(s)).collect::<std::result::Result<_, _>>()?;
        rows.push((it, u, v));
    }
    Ok(rows)
}

/// Column order of the comparison CSV.
pub const REPORT_COLUMNS: [&str; 16] = [
    "method",
    "seeds",
    "failed",
    "reward_mean",
    "reward_std",
    "reward_change_pct",
    "macro_viol_mean",
    "macro_viol_std",
    "micro_viol_mean",
    "micro_viol_std",
    "macro_reduction_pct_mean",
    "macro_reduction_pct_std",
    "micro_reduction_pct_mean",
    "micro_reduction_pct_std",
    "replication_mean",
    "replication_std",
];

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

fn opt_fixed(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), fixed)
}

/// Comparison CSV; `NA` marks reductions against a zero baseline rate.
pub fn report_csv(report: &ComparisonReport) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in &report.rows {
        let failed = r.failed.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
        let stat = |s: Stat| [fixed(s.mean), fixed(s.std)];
        let ostat = |s: Option<Stat>| [opt_fixed(s.map(|x| x.mean)), opt_fixed(s.map(|x| x.std))];
        let cells: Vec<String> = [
            vec![r.method.clone(), r.seeds.to_string(), failed],
            stat(r.expected_reward).to_vec(),
            vec![opt_fixed(r.reward_change_pct)],
            stat(r.macro_violation).to_vec(),
            stat(r.micro_violation).to_vec(),
            ostat(r.macro_reduction_pct).to_vec(),
            ostat(r.micro_reduction_pct).to_vec(),
            stat(r.replication_rate).to_vec(),
        ]
        .concat();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_report(dir: &Path, report: &ComparisonReport) -> Result<()> {
    write_file(&dir.join("report.csv"), report_csv(report).as_bytes())?;
    write_json(&dir.join("report.json"), report)
}

/// Evaluation output with domain names attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub benchmark: String,
    pub split: Split,
    pub samples: usize,
    pub domains: Vec<String>,
    pub checkpoint_fingerprint: String,
    pub data_fingerprint: String,
    pub fingerprint_mismatch: bool,
    pub result: EvalResult,
}

pub fn write_eval(path: &Path, e: &EvalFile) -> Result<()> {
    write_json(path, e)
}

pub fn read_eval(path: &Path) -> Result<EvalFile> {
    read_json(path)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    read_json(path)
}
