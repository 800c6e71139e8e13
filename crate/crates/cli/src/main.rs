//! `cfsched`: ingest traces, synthesize histories, train schedulability
//! forests, and generate counterfactual resource recommendations.
//!
//! Exit codes: 0 success, 1 user error (bad flags, unreadable input, invalid
//! or off-grid values, incompatible model), 2 internal failure.

mod render;

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cfsched::engine::{enumerate_feasible_actions, write_feasible_csv};
use cfsched::forest::{train_forest_with, FeatureMeta, TaskTypeScope, TrainOptions};
use cfsched::ingest::{assign_deadlines, label_records, parse_ndjson, parse_trace, write_ndjson, DeadlinePolicy};
use cfsched::ingest::{IngestOptions, TraceFormat};
use cfsched::synth::{generate_history, GroundTruthModel};
use cfsched::verify::run_cases;
use cfsched::{
    generate_counterfactuals, AllocationGrid, ContainerConfig, Feature, FeaturePolicy, Forest, Hyperparams, TaskSpec,
    TaskType,
};
use cfsched_service::api::{PolicyOverrides, WhatIfResponse};
use cfsched_service::{ServiceConfig, REQUEST_LOG_TARGET};

#[derive(Debug, Parser)]
#[command(name = "cfsched", version, about = "Counterfactual container sizing for deadline-bound tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a raw trace into canonical ndjson task records.
    Ingest(IngestArgs),
    /// Generate a synthetic task history from a known completion-time model.
    Synth(SynthArgs),
    /// Train a forest on ndjson records (stdin when --input is omitted).
    Train(TrainArgs),
    /// Recommend configuration changes that make a task meet its deadline.
    Explain(ExplainArgs),
    /// Predict whether one configuration meets a deadline.
    Whatif(WhatIfArgs),
    /// Export the forest's verdict on every reachable configuration as CSV.
    Feasible(FeasibleArgs),
    /// Check the engine against exhaustive enumeration on seeded cases.
    Verify(VerifyArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// `ndjson` or `alibaba_csv`.
    #[arg(long, default_value = "ndjson")]
    format: String,
    /// `explicit`, `slack:<s>` or `interval:<lo>,<hi>`; omitted keeps deadlines as read.
    #[arg(long)]
    deadline_policy: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Machine memory that trace memory percentages refer to, GiB.
    #[arg(long, default_value_t = 64.0)]
    machine_mem_gib: f64,
    /// Allocation grid JSON used for snapping.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.7)]
    slack_lo: f64,
    #[arg(long, default_value_t = 1.5)]
    slack_hi: f64,
    /// Total work, core-seconds.
    #[arg(long, default_value_t = 240.0)]
    work: f64,
    #[arg(long, default_value_t = 4)]
    parallel_cap: u32,
    #[arg(long, default_value_t = 16.0)]
    mem_requirement: f64,
    #[arg(long, default_value_t = 60.0)]
    mem_penalty: f64,
    #[arg(long, default_value_t = 2.0)]
    base: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_trees: usize,
    #[arg(long, default_value_t = 12)]
    max_depth: usize,
    #[arg(long, default_value_t = 5)]
    min_samples_leaf: usize,
    #[arg(long, default_value_t = 2)]
    features_per_split: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Threads used to grow trees; the model does not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Assign deadlines before labeling: `explicit`, `slack:<s>` or `interval:<lo>,<hi>`.
    #[arg(long)]
    deadline_policy: Option<String>,
    /// Train only on tasks of this type (`lra` or `bpa`).
    #[arg(long)]
    task_type: Option<String>,
    /// Allocation grid JSON stored with the model.
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PolicyArgs {
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    tau_prox: Option<f64>,
    #[arg(long)]
    tau_div: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Comma-separated mutable features, e.g. `cpu_cores,replicas`.
    #[arg(long)]
    mutable: Option<String>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Task as inline JSON or a path to a JSON file.
    #[arg(long)]
    task: String,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Print the candidate set as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct WhatIfArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cpu: f64,
    /// Memory, GiB.
    #[arg(long)]
    mem: f64,
    #[arg(long)]
    replicas: u32,
    /// Deadline, seconds.
    #[arg(long)]
    deadline: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct FeasibleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    mutable: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "models")]
    model_dir: PathBuf,
    /// Default allocation grid JSON for train requests.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    no_request_log: bool,
    #[arg(long)]
    workers: Option<usize>,
}

/// A failure that is not the caller's fault.
#[derive(Debug)]
struct Internal(String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read `{}`", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("cannot create `{}`", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_grid(path: Option<&Path>) -> Result<AllocationGrid> {
    let Some(path) = path else {
        return Ok(AllocationGrid::default());
    };
    let grid: AllocationGrid =
        serde_json::from_str(&read_text(path)?).with_context(|| format!("invalid grid file `{}`", path.display()))?;
    grid.validate()?;
    Ok(grid)
}

fn load_model(path: &Path) -> Result<Forest> {
    let bytes = fs::read(path).with_context(|| format!("cannot read model `{}`", path.display()))?;
    Forest::from_bytes(&bytes).with_context(|| format!("cannot load model `{}`", path.display()))
}

fn load_task(arg: &str) -> Result<TaskSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        read_text(Path::new(arg))?
    };
    let task: TaskSpec = serde_json::from_str(&text).context("invalid task JSON")?;
    task.validate()?;
    Ok(task)
}

fn parse_features(list: &str) -> Result<Vec<Feature>> {
    list.split(',')
        .map(|s| Feature::from_str(s.trim()).map_err(Into::into))
        .collect()
}

impl PolicyArgs {
    fn policy(&self, base: &FeaturePolicy) -> Result<FeaturePolicy> {
        let overrides = PolicyOverrides {
            mutable_features: self.mutable.as_deref().map(parse_features).transpose()?,
            tau_prox: self.tau_prox,
            tau_div: self.tau_div,
            k_max: self.k_max,
            q: self.q,
        };
        let policy = overrides.apply(base);
        policy.validate()?;
        Ok(policy)
    }
}

fn ingest(args: IngestArgs) -> Result<()> {
    let options = IngestOptions {
        grid: load_grid(args.grid.as_deref())?,
        machine_mem_gib: args.machine_mem_gib,
    };
    let format = TraceFormat::from_str(&args.format)?;
    let (mut records, report) = parse_trace(&args.input, format, &options)?;
    if let Some(policy) = &args.deadline_policy {
        records = assign_deadlines(&records, &DeadlinePolicy::from_str(policy)?, args.seed)?;
    }
    eprintln!(
        "accepted {}, rejected {}, unknown keys {}",
        report.accepted, report.rejected, report.unknown_keys
    );
    if !report.rejected_lines.is_empty() {
        eprintln!("first rejected lines: {:?}", report.rejected_lines);
    }
    let mut out = output(args.out.as_deref())?;
    write_ndjson(&mut out, &records)?;
    out.flush()?;
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let model = GroundTruthModel {
        work_w: args.work,
        parallel_cap: args.parallel_cap,
        mem_requirement: args.mem_requirement,
        mem_penalty: args.mem_penalty,
        base_c0: args.base,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    let grid = load_grid(args.grid.as_deref())?;
    let records = generate_history(&model, &grid, args.n, (args.slack_lo, args.slack_hi), args.seed)?;
    let mut out = output(args.out.as_deref())?;
    write_ndjson(&mut out, &records)?;
    out.flush()?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let text = match &args.input {
        Some(path) => read_text(path)?,
        None => {
            let mut text = String::new();
            io::stdin().read_to_string(&mut text).context("cannot read records from stdin")?;
            text
        }
    };
    let (mut records, report) = parse_ndjson(&text)?;
    if report.rejected > 0 {
        eprintln!("skipped {} malformed records (lines {:?})", report.rejected, report.rejected_lines);
    }
    if let Some(policy) = &args.deadline_policy {
        records = assign_deadlines(&records, &DeadlinePolicy::from_str(policy)?, args.seed)?;
    }
    let scope = match &args.task_type {
        Some(name) => {
            let task_type: TaskType = serde_json::from_value(serde_json::Value::String(name.clone()))
                .with_context(|| format!("unknown task type `{name}` (expected `lra` or `bpa`)"))?;
            records.retain(|r| r.task_type == task_type);
            TaskTypeScope::PerType { task_type }
        }
        None => TaskTypeScope::Global,
    };
    let hyperparams = Hyperparams {
        n_trees: args.n_trees,
        max_depth: args.max_depth,
        min_samples_leaf: args.min_samples_leaf,
        features_per_split: args.features_per_split,
        seed: args.seed,
    };
    let options = TrainOptions {
        feature_meta: FeatureMeta::with_grid(load_grid(args.grid.as_deref())?),
        scope,
        workers: args.workers.max(1),
    };
    let forest = train_forest_with(&label_records(&records)?, &hyperparams, &options)?;
    forest
        .save(&args.out)
        .with_context(|| format!("cannot write model `{}`", args.out.display()))?;
    let m = &forest.metrics;
    let oob = m.oob_error.map(|e| format!("{e:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "trained {} trees on {} instances: train accuracy {:.4}, OOB error {oob}",
        forest.n_trees(),
        m.n_instances,
        m.train_accuracy
    );
    Ok(())
}

fn explain(args: ExplainArgs) -> Result<()> {
    let forest = load_model(&args.model)?;
    let task = load_task(&args.task)?;
    let policy = args.policy.policy(&FeaturePolicy::default())?;
    let set = generate_counterfactuals(&forest, &task, &policy, forest.grid())?;
    let mut out = io::stdout().lock();
    if args.json {
        out.write_all(&serde_json::to_vec(&set)?)?;
        out.write_all(b"\n")?;
    } else {
        out.write_all(render::candidate_table(&set).as_bytes())?;
    }
    Ok(())
}

fn whatif(args: WhatIfArgs) -> Result<()> {
    let forest = load_model(&args.model)?;
    let config = ContainerConfig::new(args.cpu, args.mem, args.replicas);
    let task = TaskSpec::new("whatif", config.clone(), args.deadline);
    task.validate()?;
    config.check_on_grid(forest.grid())?;
    let p = forest.predict(&task.features())?;
    if args.json {
        let response = WhatIfResponse {
            predicted_label: p.label,
            vote_fraction: p.vote_fraction,
        };
        println!("{}", serde_json::to_string(&response)?);
    } else {
        let verdict = if p.label == 1 { "meets the deadline" } else { "misses the deadline" };
        println!("{verdict} (vote fraction {:.2})", p.vote_fraction);
    }
    Ok(())
}

fn feasible(args: FeasibleArgs) -> Result<()> {
    let forest = load_model(&args.model)?;
    let task = load_task(&args.task)?;
    let policy = PolicyArgs {
        q: None,
        tau_prox: None,
        tau_div: None,
        k_max: None,
        mutable: args.mutable,
    }
    .policy(&FeaturePolicy::default())?;
    let rows = enumerate_feasible_actions(&forest, &task, &policy, forest.grid())?;
    let mut out = output(args.out.as_deref())?;
    write_feasible_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<()> {
    let outcomes = run_cases(args.cases, args.seed)?;
    let matched = outcomes.iter().filter(|o| o.matched).count();
    println!("{matched}/{} oracle matches", outcomes.len());
    if let Some(bad) = outcomes.iter().find(|o| !o.matched) {
        eprintln!("first mismatch: {}", serde_json::to_string_pretty(bad)?);
        return Err(Internal(format!("{} cases disagree with the oracle", outcomes.len() - matched)).into());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .with_context(|| format!("invalid listen address `{}:{}`", args.host, args.port))?;
    let mut config = ServiceConfig {
        addr,
        model_dir: args.model_dir,
        default_grid: load_grid(args.grid.as_deref())?,
        default_policy: args.policy.policy(&FeaturePolicy::default())?,
        request_log: !args.no_request_log,
        ..ServiceConfig::default()
    };
    if let Some(w) = args.workers {
        config.workers = w.max(1);
    }
    let runtime = tokio::runtime::Runtime::new().context("cannot start runtime")?;
    runtime
        .block_on(cfsched_service::serve(config))
        .map_err(|e| match e {
            cfsched_service::ServiceError::Internal(m) => Internal(m).into(),
            other => anyhow::Error::new(other),
        })
}

fn init_logging(command: &Command) {
    let default = if matches!(command, Command::Serve(_)) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format(|buf, record| {
            if record.target() == REQUEST_LOG_TARGET {
                writeln!(buf, "{}", record.args())
            } else {
                writeln!(buf, "[{} {}] {}", record.level(), record.target(), record.args())
            }
        })
        .init();
}

/// 1 for problems with the caller's input, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<Internal>()) {
        return 2;
    }
    let user = err.chain().any(|e| {
        e.is::<cfsched::Error>()
            || e.is::<io::Error>()
            || e.is::<serde_json::Error>()
            || e.is::<cfsched_service::ServiceError>()
    });
    if user {
        1
    } else {
        2
    }
}

fn broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(&cli.command);
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Explain(a) => explain(a),
        Command::Whatif(a) => whatif(a),
        Command::Feasible(a) => feasible(a),
        Command::Verify(a) => verify(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
