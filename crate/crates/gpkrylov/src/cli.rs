//! Batch command-line front end: train per seed with JSON-lines traces and a
//! cross-seed summary, evaluate saved hyperparameters, run the bound
//! validation suite, and materialize synthetic datasets.
//!
//! Standard output carries only data (JSON); progress and diagnostics go to
//! standard error. Exit codes: 0 success, 1 configuration error, 2 data
//! error, 3 numerical failure or failed validation property.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{self, DataError, Dataset, Normalization};
use crate::estimator::{estimate_lml, EstimatorConfig};
use crate::kernel::{exact_lml, Hyperparameters};
use crate::training::{fit, predict_mean, rmse, TrainConfig, TrainTrace};
use crate::validate::{run_all, ValidateOptions};

/// Fixed generation seed for `--synth` datasets so every run sees the same
/// data, mirroring how a dataset file would behave.
const SYNTH_DATA_SEED: u64 = 0xda7a_5eed;

/// Generation hyperparameters for `--synth` datasets.
fn synth_generation_hp(dims: usize) -> Hyperparameters {
    Hyperparameters {
        lengthscales: vec![0.3; dims],
        signal_variance: 1.0,
        noise_variance: 0.1,
        mean: 0.0,
    }
}

#[derive(Debug, Parser)]
#[command(name = "gpk", about = "Gaussian process regression with certified-bias Krylov estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn hyperparameters, one run per seed, writing traces and parameters.
    Train(TrainArgs),
    /// Evaluate a saved parameter file on its dataset split.
    Eval(EvalArgs),
    /// Run the bound-validation property suite on random instances.
    ValidateBounds(ValidateArgs),
    /// Generate a synthetic dataset CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Clone)]
struct DataArgs {
    /// CSV dataset path (header row detected automatically).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic dataset spec `N,D` drawn from a fixed-seed Matérn GP.
    #[arg(long)]
    synth: Option<String>,
    /// Target column name or zero-based index.
    #[arg(long, default_value = "y")]
    target: String,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Certified bias ceiling in nats.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Number of Rademacher probe vectors.
    #[arg(long, default_value_t = 1)]
    probes: usize,
    /// Cap on inner Krylov rounds per estimate (default min(n, 1000)).
    #[arg(long)]
    max_iters: Option<usize>,
    /// Preconditioner rank (0 disables preconditioning).
    #[arg(long, default_value_t = 100)]
    precond_rank: usize,
    /// Outer optimization steps.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Comma-separated run seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    /// Output directory for traces, parameters, and the summary.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Test-RMSE cadence in outer steps.
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Parameter file written by `train`.
    #[arg(long)]
    params: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Number of random instances per property.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fault-injection hook: swap the Gauss–Radau node sides. The sandwich
    /// check must then fail, proving the suite has teeth.
    #[arg(long, hide = true)]
    swap_radau_nodes: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic dataset spec `N,D`.
    #[arg(long)]
    synth: String,
    /// Destination CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::training::TrainError> for CliError {
    fn from(e: crate::training::TrainError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<crate::estimator::EstimatorError> for CliError {
    fn from(e: crate::estimator::EstimatorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<crate::linalg::LinalgError> for CliError {
    fn from(e: crate::linalg::LinalgError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::ValidateBounds(args) => cmd_validate_bounds(&args),
        Command::Synth(args) => cmd_synth(&args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Serializable run configuration; its hash is the trace fingerprint.
#[derive(Debug, Serialize)]
struct RunConfig {
    command: String,
    data: Option<String>,
    synth: Option<String>,
    target: String,
    epsilon: f64,
    probes: usize,
    max_iters: Option<usize>,
    precond_rank: usize,
    steps: usize,
    lr: f64,
    seeds: Vec<u64>,
    eval_every: usize,
}

fn config_fingerprint(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct HpRecord {
    lengthscales: Vec<f64>,
    signal_variance: f64,
    noise_variance: f64,
    mean: f64,
}

impl From<&Hyperparameters> for HpRecord {
    fn from(hp: &Hyperparameters) -> Self {
        Self {
            lengthscales: hp.lengthscales.clone(),
            signal_variance: hp.signal_variance,
            noise_variance: hp.noise_variance,
            mean: hp.mean,
        }
    }
}

/// One JSON line per outer step. `objective` is the negated surrogate (an
/// upper estimate of the negative LML), matching the usual loss-style traces.
#[derive(Debug, Serialize)]
struct TraceLine {
    step: usize,
    objective: f64,
    bias_bound: f64,
    iters: usize,
    lanczos_t: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rmse: Option<f64>,
    hp: HpRecord,
    wall_ms: u128,
    config_fp: String,
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Result<Vec<u64>, _> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse::<u64>)
        .collect();
    let seeds = seeds.map_err(|e| CliError::Config(format!("bad --seeds list {spec:?}: {e}")))?;
    if seeds.is_empty() {
        return Err(CliError::Config("at least one seed required".into()));
    }
    Ok(seeds)
}

fn parse_synth_spec(spec: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = spec.split([',', 'x']).map(str::trim).collect();
    if parts.len() != 2 {
        return Err(CliError::Config(format!("--synth expects N,D, got {spec:?}")));
    }
    let n = parts[0]
        .parse::<usize>()
        .map_err(|e| CliError::Config(format!("bad synth row count: {e}")))?;
    let d = parts[1]
        .parse::<usize>()
        .map_err(|e| CliError::Config(format!("bad synth dimension count: {e}")))?;
    if n < 3 || d == 0 || n > 4096 {
        return Err(CliError::Config(format!("synth spec out of range: n={n}, d={d}")));
    }
    Ok((n, d))
}

/// First CSV line decides header presence: a header is assumed when any field
/// fails to parse as a number.
fn sniff_header(path: &Path) -> Result<bool, CliError> {
    let content = fs::read_to_string(path).map_err(|e| {
        CliError::Data(format!("cannot read {}: {e}", path.display()))
    })?;
    let first = content
        .lines()
        .next()
        .ok_or_else(|| CliError::Data(format!("{} is empty", path.display())))?;
    Ok(first.split(',').any(|f| f.trim().parse::<f64>().is_err()))
}

fn load_dataset(args: &DataArgs) -> Result<Dataset, CliError> {
    match (&args.data, &args.synth) {
        (Some(path), None) => {
            if !path.exists() {
                return Err(CliError::Data(format!("dataset not found: {}", path.display())));
            }
            let has_header = sniff_header(path)?;
            Ok(data::load_csv(path, &args.target, has_header)?)
        }
        (None, Some(spec)) => {
            let (n, d) = parse_synth_spec(spec)?;
            Ok(data::synth_gp(n, d, &synth_generation_hp(d), SYNTH_DATA_SEED)?)
        }
        (Some(_), Some(_)) => Err(CliError::Config("pass either --data or --synth, not both".into())),
        (None, None) => Err(CliError::Config("one of --data or --synth is required".into())),
    }
}

/// Test RMSE in original target units: shared by training-time evaluation and
/// `eval` so the two agree exactly.
fn test_rmse(ds: &Dataset, hp: &Hyperparameters) -> Result<f64, CliError> {
    let (x_train, y_train) = ds.train_rows()?;
    let (x_test, y_test) = ds.test_rows()?;
    let pred = predict_mean(&x_train, &y_train, &x_test, hp, 1e-6)?;
    let value = rmse(&pred.values, &y_test)?;
    let scale = ds.normalization.as_ref().map_or(1.0, |s| s.y_std);
    Ok(value * scale)
}

fn quantiles(mut values: Vec<f64>) -> (f64, f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let k = values.len();
    let pick = |q: f64| values[((k - 1) as f64 * q).round() as usize];
    (pick(0.25), pick(0.5), pick(0.75))
}

#[derive(Debug, Serialize)]
struct SummaryStat {
    lower_quartile: f64,
    median: f64,
    upper_quartile: f64,
    per_seed: Vec<f64>,
}

impl SummaryStat {
    fn from_values(per_seed: Vec<f64>) -> Self {
        let (lower_quartile, median, upper_quartile) = quantiles(per_seed.clone());
        Self { lower_quartile, median, upper_quartile, per_seed }
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    config_fp: String,
    seeds: Vec<u64>,
    final_rmse: SummaryStat,
    final_objective: SummaryStat,
    total_inner_iterations: Vec<usize>,
}

struct SeedRun {
    seed: u64,
    hp: Hyperparameters,
    trace: TrainTrace,
    stats: Normalization,
}

fn worker_cap(n_jobs: usize) -> usize {
    if let Ok(v) = std::env::var("GPK_THREADS") {
        if let Ok(cap) = v.parse::<usize>() {
            return cap.clamp(1, n_jobs.max(1));
        }
    }
    std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .clamp(1, n_jobs.max(1))
}

fn run_one_seed(
    raw: &Dataset,
    seed: u64,
    train_cfg: &TrainConfig,
) -> Result<SeedRun, CliError> {
    let split_ds = data::split(raw, seed);
    let ds = data::normalize(&split_ds)?;
    let stats = ds.normalization.clone().expect("normalize sets statistics");
    let (x_train, y_train) = ds.train_rows()?;
    let mut cfg = train_cfg.clone();
    cfg.estimator.seed = seed;
    let mut hook = |_step: usize, hp: &Hyperparameters| test_rmse(&ds, hp).ok();
    let (hp, trace) = fit(&x_train, &y_train, &cfg, Some(&mut hook))?;
    Ok(SeedRun { seed, hp, trace, stats })
}

fn write_params_file(
    path: &Path,
    run: &SeedRun,
    config_fp: &str,
) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str("# learned hyperparameters (constrained space, normalized units)\n");
    for (i, l) in run.hp.lengthscales.iter().enumerate() {
        out.push_str(&format!("lengthscale_{i} = {l:.17e}\n"));
    }
    out.push_str(&format!("signal_variance = {:.17e}\n", run.hp.signal_variance));
    out.push_str(&format!("noise_variance = {:.17e}\n", run.hp.noise_variance));
    out.push_str(&format!("mean = {:.17e}\n", run.hp.mean));
    out.push_str(&format!("split_seed = {}\n", run.seed));
    for (i, (m, s)) in run.stats.x_mean.iter().zip(run.stats.x_std.iter()).enumerate() {
        out.push_str(&format!("x_mean_{i} = {m:.17e}\n"));
        out.push_str(&format!("x_std_{i} = {s:.17e}\n"));
    }
    out.push_str(&format!("y_mean = {:.17e}\n", run.stats.y_mean));
    out.push_str(&format!("y_std = {:.17e}\n", run.stats.y_std));
    out.push_str(&format!("config_fp = {config_fp}\n"));
    fs::write(path, out).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_trace_file(
    path: &Path,
    run: &SeedRun,
    config_fp: &str,
) -> Result<(), CliError> {
    let mut file = fs::File::create(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))?;
    for rec in &run.trace.records {
        let line = TraceLine {
            step: rec.step,
            objective: -rec.objective,
            bias_bound: rec.bias_bound,
            iters: rec.iterations,
            lanczos_t: rec.lanczos_steps.clone(),
            rmse: rec.rmse,
            hp: HpRecord::from(&rec.hyperparameters),
            wall_ms: rec.duration.as_millis(),
            config_fp: config_fp.to_string(),
        };
        let json = serde_json::to_string(&line)
            .map_err(|e| CliError::Numeric(format!("trace serialization failed: {e}")))?;
        writeln!(file, "{json}")
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    if args.steps == 0 {
        return Err(CliError::Config("--steps must be at least 1".into()));
    }
    if !(args.epsilon > 0.0) {
        return Err(CliError::Config("--epsilon must be positive".into()));
    }
    if args.eval_every == 0 {
        return Err(CliError::Config("--eval-every must be at least 1".into()));
    }
    let seeds = parse_seeds(&args.seeds)?;
    let raw = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;

    let run_config = RunConfig {
        command: "train".into(),
        data: args.data.data.as_ref().map(|p| p.display().to_string()),
        synth: args.data.synth.clone(),
        target: args.data.target.clone(),
        epsilon: args.epsilon,
        probes: args.probes,
        max_iters: args.max_iters,
        precond_rank: args.precond_rank,
        steps: args.steps,
        lr: args.lr,
        seeds: seeds.clone(),
        eval_every: args.eval_every,
    };
    let config_fp = config_fingerprint(&run_config);

    let train_cfg = TrainConfig {
        estimator: EstimatorConfig {
            epsilon: args.epsilon,
            probes: args.probes.max(1),
            max_krylov_iters: args.max_iters,
            precond_rank: args.precond_rank,
            seed: 0,
        },
        steps: args.steps,
        learning_rate: args.lr,
        eval_every: args.eval_every,
    };

    // Seeds run in parallel, capped by GPK_THREADS (or the machine width).
    let cap = worker_cap(seeds.len());
    let mut runs: Vec<SeedRun> = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(cap) {
        let mut batch: Vec<Result<SeedRun, CliError>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let raw_ref = &raw;
                    let cfg_ref = &train_cfg;
                    scope.spawn(move || run_one_seed(raw_ref, seed, cfg_ref))
                })
                .collect();
            for h in handles {
                batch.push(h.join().expect("seed worker panicked"));
            }
        });
        for item in batch {
            let run = item?;
            eprintln!(
                "seed {} done: objective {:.4}, final rmse {:?}",
                run.seed,
                run.trace.last().map_or(f64::NAN, |r| r.objective),
                run.trace.last().and_then(|r| r.rmse)
            );
            runs.push(run);
        }
    }

    let mut final_rmse = Vec::new();
    let mut final_objective = Vec::new();
    let mut totals = Vec::new();
    for run in &runs {
        let trace_path = args.out.join(format!("trace_seed{}.jsonl", run.seed));
        write_trace_file(&trace_path, run, &config_fp)?;
        let params_path = args.out.join(format!("params_seed{}.txt", run.seed));
        write_params_file(&params_path, run, &config_fp)?;
        let last = run
            .trace
            .last()
            .ok_or_else(|| CliError::Numeric("empty trace".into()))?;
        final_rmse.push(last.rmse.unwrap_or(f64::NAN));
        final_objective.push(-last.objective);
        totals.push(run.trace.total_iterations());
    }

    let summary = TrainSummary {
        config_fp,
        seeds,
        final_rmse: SummaryStat::from_values(final_rmse),
        final_objective: SummaryStat::from_values(final_objective),
        total_inner_iterations: totals,
    };
    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Numeric(format!("summary serialization failed: {e}")))?;
    fs::write(args.out.join("summary.json"), &summary_json)
        .map_err(|e| CliError::Data(format!("cannot write summary: {e}")))?;
    println!("{summary_json}");
    Ok(())
}

fn parse_params_file(path: &Path) -> Result<(Hyperparameters, u64, Normalization), CliError> {
    let content = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut map = std::collections::BTreeMap::new();
    for line in content.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("malformed parameter line: {line:?}")))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<f64, CliError> {
        map.get(key)
            .ok_or_else(|| CliError::Config(format!("missing key {key:?} in {}", path.display())))?
            .parse::<f64>()
            .map_err(|e| CliError::Config(format!("bad value for {key:?}: {e}")))
    };
    let mut lengthscales = Vec::new();
    while map.contains_key(&format!("lengthscale_{}", lengthscales.len())) {
        lengthscales.push(get(&format!("lengthscale_{}", lengthscales.len()))?);
    }
    if lengthscales.is_empty() {
        return Err(CliError::Config("no lengthscales in parameter file".into()));
    }
    let hp = Hyperparameters {
        lengthscales,
        signal_variance: get("signal_variance")?,
        noise_variance: get("noise_variance")?,
        mean: get("mean")?,
    };
    if hp.validate().is_err() {
        return Err(CliError::Config("parameter file violates the positivity floor".into()));
    }
    let split_seed = get("split_seed")? as u64;
    let mut x_mean = Vec::new();
    let mut x_std = Vec::new();
    while map.contains_key(&format!("x_mean_{}", x_mean.len())) {
        x_mean.push(get(&format!("x_mean_{}", x_mean.len()))?);
        x_std.push(get(&format!("x_std_{}", x_std.len()))?);
    }
    let stats = Normalization { x_mean, x_std, y_mean: get("y_mean")?, y_std: get("y_std")? };
    Ok((hp, split_seed, stats))
}

#[derive(Debug, Serialize)]
struct EvalReport {
    rmse: f64,
    lml: f64,
    lml_kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    lml_bias_bound: Option<f64>,
    n_train: usize,
    n_test: usize,
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (hp, split_seed, stats) = parse_params_file(&args.params)?;
    let raw = load_dataset(&args.data)?;
    if stats.x_mean.len() != raw.dims() {
        return Err(CliError::Data(format!(
            "parameter file has {} input dimensions, dataset has {}",
            stats.x_mean.len(),
            raw.dims()
        )));
    }
    let split_ds = data::split(&raw, split_seed);
    let ds = data::normalize_with(&split_ds, &stats);
    let rmse_value = test_rmse(&ds, &hp)?;
    let (x_train, y_train) = ds.train_rows()?;
    let n_train = x_train.nrows();

    let (lml, kind, bias) = if n_train <= 2048 {
        (exact_lml(&x_train, &y_train, &hp)?, "exact".to_string(), None)
    } else {
        let est = estimate_lml(&x_train, &y_train, &hp, &EstimatorConfig::default(), None)?;
        (est.value, "bounded".to_string(), Some(est.bias_bound))
    };

    let report = EvalReport {
        rmse: rmse_value,
        lml,
        lml_kind: kind,
        lml_bias_bound: bias,
        n_train,
        n_test: ds.test_rows()?.0.nrows(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Numeric(format!("report serialization failed: {e}")))?
    );
    Ok(())
}

fn cmd_validate_bounds(args: &ValidateArgs) -> Result<(), CliError> {
    if args.trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    let opts = ValidateOptions {
        trials: args.trials,
        seed: args.seed,
        swap_radau_nodes: args.swap_radau_nodes,
    };
    let reports = run_all(&opts);
    let mut all_ok = true;
    let mut lines = Vec::new();
    for report in &reports {
        all_ok &= report.ok();
        lines.push(serde_json::json!({
            "check": report.name,
            "passed": report.passed,
            "failed": report.failed,
            "ok": report.ok(),
        }));
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "checks": lines,
            "all_ok": all_ok,
        }))
        .map_err(|e| CliError::Numeric(format!("report serialization failed: {e}")))?
    );
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Numeric("one or more validation properties failed".into()))
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let (n, d) = parse_synth_spec(&args.synth)?;
    let ds = data::synth_gp(n, d, &synth_generation_hp(d), SYNTH_DATA_SEED)?;
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("x{j},"));
    }
    out.push_str("y\n");
    for i in 0..n {
        for j in 0..d {
            out.push_str(&format!("{:.17e},", ds.x[(i, j)]));
        }
        out.push_str(&format!("{:.17e}\n", ds.y[i]));
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    fs::write(&args.out, out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", args.out.display())))?;
    eprintln!("wrote {n}x{d} synthetic dataset to {}", args.out.display());
    Ok(())
}
