//! Subcommands. Each returns a JSON summary; files carry the actual data
//! from one step to the next.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use shepherd_core::answer::ExactMatchJudge;
use shepherd_core::labeling::{
    dataset_stats, filter_dataset, label_dataset, read_jsonl, write_jsonl, DropReason, LabelConfig, LabeledExample,
    SamplingConfig,
};
use shepherd_core::metrics::{
    calibrate, evaluate, min_cost_at_accuracy, paper_table_checks, parse_paper_table, rows_to_csv,
    rows_to_text, summarize_outcomes, Baselines, Calibration, CalibrationGrid, CalibrationMode, ReportRow,
};
use shepherd_core::par::{self, Exec};
use shepherd_core::policy::{oracle_policy, write_outcomes, Executor, Outcome, PolicyConfig, Rule, StaticPolicy};
use shepherd_core::predictor::embed::{EmbedderRegistry, HASHED_NGRAM_ID};
use shepherd_core::predictor::features::FeatureMode;
use shepherd_core::predictor::train::{train, TrainConfig, TrainingExample};
use shepherd_core::predictor::ShepherdPredictor;
use shepherd_core::simulator::{
    generate_trace, load_profile, preset, rescore_items, run_experiment, split_dataset, trace_shares, ExperimentConfig,
    Strategy,
};
use shepherd_core::{CostModel, Money, Query, TaskKind};

use crate::config::{load_json, BackendsConfig, GatewayConfig};
use crate::gateway::{self, Gateway};

pub const POLICY_SCHEMA: &str = "shepherd-policy/1";

#[derive(Debug, Parser)]
#[command(name = "shepherd", version, about = "Hint-based SLM/LLM collaboration: label, train, calibrate, evaluate, simulate and serve")]
pub struct Cli {
    /// Run data-parallel loops on a single thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label queries with their minimum hint size against an SLM/LLM pair.
    Label(LabelArgs),
    /// Train the hint predictor on a labeled dataset.
    Train(TrainArgs),
    /// Pick (alpha, eta_hint) on a validation set and write a policy file.
    Calibrate(CalibrateArgs),
    /// Run a calibrated policy and baselines on a test set, or recheck a published table.
    Evaluate(EvaluateArgs),
    /// Run the full pipeline on a synthetic heavy-tailed workload.
    Simulate(SimulateArgs),
    /// Label statistics of a dataset or a synthetic trace.
    Stats(StatsArgs),
    /// Serve the OpenAI-compatible shepherding gateway.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Proactive,
    Reactive,
}

impl From<ModeArg> for FeatureMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Proactive => FeatureMode::Proactive,
            ModeArg::Reactive => FeatureMode::Reactive,
        }
    }
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Backends config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Queries, one JSON object per line: {"id", "question", "answer", "task_kind"?}.
    #[arg(long)]
    pub queries: PathBuf,
    /// Labeled dataset to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub step_pct: u32,
    /// SLM samples stored per query for reactive features; 0 disables.
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
    #[arg(long, default_value_t = shepherd_core::labeling::DEFAULT_OUTLIER_THRESHOLD)]
    pub outlier_threshold: usize,
    /// Write every labeled example, skipping the filter.
    #[arg(long)]
    pub keep_all: bool,
    /// Also write seeded train/val/test parts, e.g. `0.6,0.2`.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set for model selection; otherwise split off `--val-fraction` of `--data`.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Reactive)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    /// Training hyperparameters (JSON); mode and seed come from the flags.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
#[group(id = "target", multiple = false)]
pub struct TargetArgs {
    /// Spend at most this many dollars on the validation set.
    #[arg(long, group = "target")]
    pub budget_usd: Option<f64>,
    /// Spend at most this share of the LLM-only validation cost.
    #[arg(long, group = "target")]
    pub budget_fraction: Option<f64>,
    /// Reach at least this validation accuracy (0 to 1).
    #[arg(long, group = "target")]
    pub accuracy_floor: Option<f64>,
    /// Reach at least this share of the LLM-only validation accuracy (default 0.9).
    #[arg(long, group = "target")]
    pub accuracy_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Labeled validation set.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Policy file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Backends config supplying prices; defaults to a hosted 70B LLM and a free SLM.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a named preset (gsm8k, cnk12, humaneval, mbpp).
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    pub target: TargetArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Recompute ACE and cost reduction for a published results table.
    #[arg(long, conflicts_with_all = ["data", "model", "policy", "config"])]
    pub from_paper_table: Option<PathBuf>,
    /// With `--from-paper-table`: fail when any ACE deviates by more than this.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labeled test set.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Policy file from `calibrate`.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Report CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-strategy outcome files.
    #[arg(long)]
    pub outcomes_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Preset name (gsm8k, cnk12) or a profile JSON file.
    #[arg(long)]
    pub profile: String,
    /// Entry to pick when the profile file holds several.
    #[arg(long)]
    pub profile_name: Option<String>,
    #[arg(short = 'n', long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated: llm_only, slm_only, oracle, proactive, reactive, fixed:P.
    #[arg(long, default_value = "llm_only,slm_only,oracle,proactive,reactive", value_delimiter = ',')]
    pub strategies: Vec<String>,
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
    /// Full experiment report (JSON).
    #[arg(long)]
    pub report_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Labeled dataset.
    #[arg(long, conflicts_with = "profile")]
    pub data: Option<PathBuf>,
    /// Generate a synthetic trace from this preset or profile file instead.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(short = 'n', long, default_value_t = 50_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Gateway config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured listen address.
    #[arg(long)]
    pub listen: Option<String>,
}

/// Error with a stable kind and optional structured details.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), details: None }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }
}

fn core_kind(e: &shepherd_core::Error) -> &'static str {
    use shepherd_core::Error as E;
    match e {
        E::Schema { .. } => "schema_mismatch",
        E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "missing_input",
        E::Io(_) => "io",
        E::Json(_) => "parse",
        E::EmptyDataset => "empty_dataset",
        E::Backend(_) => "backend",
        E::DominanceViolation(_) => "dominance_violation",
        E::MissingGroundTruth(_) => "missing_ground_truth",
        E::InvalidProfile(_) => "invalid_profile",
        E::Config(_) | E::InvalidParams(_) | E::InvalidGridStep(_) => "config",
        _ => "error",
    }
}

/// Machine-readable form of an error for stderr.
pub fn error_json(e: &anyhow::Error) -> Value {
    let mut kind = "error";
    let mut details = None;
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            kind = c.kind;
            details = c.details.clone();
            break;
        }
        if let Some(c) = cause.downcast_ref::<shepherd_core::Error>() {
            kind = core_kind(c);
            break;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            kind = if io.kind() == std::io::ErrorKind::NotFound { "missing_input" } else { "io" };
            break;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            kind = "parse";
            break;
        }
    }
    let causes: Vec<String> = e.chain().map(|c| c.to_string()).collect();
    let mut err = json!({ "kind": kind, "message": format!("{e:#}"), "causes": causes });
    if let Some(d) = details {
        err["details"] = d;
    }
    json!({ "error": err })
}

pub fn run(cli: Cli) -> anyhow::Result<Value> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Label(a) => label(a, exec),
        Command::Train(a) => train_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a, exec),
        Command::Evaluate(a) => evaluate_cmd(a, exec),
        Command::Simulate(a) => simulate(a, exec),
        Command::Stats(a) => stats(a, exec),
        Command::Serve(a) => serve(a),
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let f = File::open(path).map_err(|e| {
        let kind = if e.kind() == std::io::ErrorKind::NotFound { "missing_input" } else { "io" };
        CliError::new(kind, format!("cannot open {}: {e}", path.display()))
    })?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn read_dataset(path: &Path) -> anyhow::Result<Vec<LabeledExample>> {
    read_jsonl(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn write_dataset(path: &Path, examples: &[LabeledExample]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    write_jsonl(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

/// One line of a query file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default)]
    pub task_kind: Option<TaskKind>,
}

pub fn read_queries(path: &Path, default_kind: TaskKind) -> anyhow::Result<Vec<Query>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::new("missing_input", format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: QueryRecord = serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            Ok(Query::new(r.id, &r.question, r.task_kind.unwrap_or(default_kind), r.answer)?)
        })
        .collect()
}

fn parse_split(s: &str) -> anyhow::Result<(f64, f64)> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().context("--split expects `train,val`")?;
    match parts[..] {
        [t, v] => Ok((t, v)),
        _ => bail!(CliError::new("config", "--split expects two fractions, e.g. 0.6,0.2")),
    }
}

fn with_suffix(path: &Path, part: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    path.with_file_name(format!("{stem}.{part}.jsonl"))
}

fn label(a: LabelArgs, exec: Exec) -> anyhow::Result<Value> {
    let cfg: BackendsConfig = load_json(&a.config)?;
    let (slm, llm) = cfg.build(&base_dir(&a.config))?;
    let queries = read_queries(&a.queries, cfg.task_kind)?;
    let cost = cfg.cost_model()?;
    let defaults = SamplingConfig::default();
    let lcfg = LabelConfig {
        step_pct: a.step_pct,
        n_max: cfg.n_max,
        reactive: (a.samples > 0).then_some(SamplingConfig { k: a.samples, ..defaults }),
    };
    let run = label_dataset(&queries, slm.as_ref(), llm.as_ref(), &ExactMatchJudge::default(), &lcfg, cost, exec);
    let labeled = run.examples.len();
    let (kept, dropped) = if a.keep_all {
        (run.examples, Vec::new())
    } else {
        filter_dataset(run.examples, a.outlier_threshold)
    };
    let mut dropped_counts = BTreeMap::new();
    for reason in [DropReason::LlmIncorrectNoHintHelps, DropReason::Outlier] {
        dropped_counts.insert(reason.as_str(), dropped.iter().filter(|(_, r)| *r == reason).count());
    }
    write_dataset(&a.out, &kept)?;
    let mut splits = BTreeMap::new();
    if let Some(s) = &a.split {
        let (tf, vf) = parse_split(s)?;
        let parts = split_dataset(kept.clone(), tf, vf, a.seed)?;
        for (name, part) in ["train", "val", "test"].iter().zip(&parts) {
            let p = with_suffix(&a.out, name);
            write_dataset(&p, part)?;
            splits.insert(*name, json!({ "path": p, "n": part.len() }));
        }
    }
    Ok(json!({
        "queries": queries.len(),
        "labeled": labeled,
        "skipped": run.skipped,
        "dropped": dropped_counts,
        "written": kept.len(),
        "out": a.out,
        "splits": splits,
        "usage": run.usage,
        "cost_usd": run.usage.dollars(&cost),
    }))
}

fn to_training(examples: &[LabeledExample], mode: FeatureMode) -> anyhow::Result<Vec<TrainingExample>> {
    // unsolvable examples carry no size target
    Ok(examples.iter().filter(|e| !e.unsolvable).map(|e| TrainingExample::from_labeled(e, mode)).collect::<Result<_, _>>()?)
}

/// Train/validation examples in a deterministic order.
fn train_val(a: &TrainArgs) -> anyhow::Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let data = read_dataset(&a.data)?;
    if let Some(v) = &a.val {
        return Ok((data, read_dataset(v)?));
    }
    let [train, val, _] = split_dataset(data, 1.0 - a.val_fraction, a.val_fraction, a.seed)?;
    Ok((train, val))
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<Value> {
    let mode: FeatureMode = a.mode.into();
    let mut cfg: TrainConfig = match &a.train_config {
        Some(p) => load_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.mode = mode;
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    let (train_set, val_set) = train_val(&a)?;
    let (tr, va) = (to_training(&train_set, mode)?, to_training(&val_set, mode)?);
    let embedder = EmbedderRegistry::default().resolve(HASHED_NGRAM_ID, a.embed_dim)?;
    let (model, report) = train(&tr, &va, embedder.as_ref(), &cfg)?;
    model.save(&a.out)?;
    Ok(json!({
        "out": a.out,
        "mode": mode,
        "checksum": model.checksum,
        "train_examples": tr.len(),
        "val_examples": va.len(),
        "best_epoch": report.best_epoch,
        "val_loss": report.val_loss.get(report.best_epoch).copied(),
    }))
}

/// Calibrated policy on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub schema: String,
    pub mode: FeatureMode,
    /// Checksum of the model the thresholds were fitted for.
    pub model_checksum: String,
    pub policy: PolicyConfig,
    pub validation_accuracy: f64,
    pub validation_cost: Money,
    pub feasible: bool,
}

impl PolicyFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let v: Value = load_json(path)?;
        let found = v.get("schema").and_then(Value::as_str).unwrap_or("");
        if found != POLICY_SCHEMA {
            return Err(shepherd_core::Error::Schema { expected: POLICY_SCHEMA.into(), found: found.into() }.into());
        }
        Ok(serde_json::from_value(v)?)
    }
}

fn cost_from(config: Option<&Path>) -> anyhow::Result<CostModel> {
    match config {
        Some(p) => load_json::<BackendsConfig>(p)?.cost_model(),
        None => Ok(CostModel::hosted_70b_free_slm()),
    }
}

fn calibrate_cmd(a: CalibrateArgs, exec: Exec) -> anyhow::Result<Value> {
    let val = read_dataset(&a.data)?;
    if val.is_empty() {
        return Err(shepherd_core::Error::EmptyDataset.into());
    }
    let predictor = ShepherdPredictor::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mode = predictor.model.mode;
    let cm = cost_from(a.config.as_deref())?;
    let base = match &a.preset {
        Some(name) => PolicyConfig::preset(name).ok_or_else(|| CliError::new("config", format!("unknown preset `{name}`")))?,
        None => PolicyConfig { passes: predictor.model.config.passes, ..PolicyConfig::default() },
    };
    let items = rescore_items(&val, &predictor, mode, &base, &cm, exec)?;
    let llm_acc = val.iter().filter(|e| e.llm_correct).count() as f64 / val.len() as f64;
    let llm_cost: Money = val.iter().map(|e| cm.llm_charge(e.query_len as u64, e.full_llm_len as u64)).sum();
    let t = &a.target;
    let target = if let Some(b) = t.budget_usd {
        CalibrationMode::Budget(Money::from_dollars(b))
    } else if let Some(f) = t.budget_fraction {
        CalibrationMode::Budget(Money::from_dollars(llm_cost.dollars() * f))
    } else if let Some(f) = t.accuracy_floor {
        CalibrationMode::AccuracyFloor(f)
    } else {
        CalibrationMode::AccuracyFloor(llm_acc * t.accuracy_fraction.unwrap_or(0.9))
    };
    let grid = CalibrationGrid::standard(base.n_max);
    let point = match calibrate(&items, &grid, target, exec)? {
        Calibration::Feasible(p) => p,
        Calibration::Infeasible { frontier } => {
            return Err(CliError::new("infeasible_target", format!("no grid point meets {target:?}"))
                .with_details(json!({ "frontier": frontier }))
                .into())
        }
    };
    let min_cost = min_cost_at_accuracy(&format!("{mode:?}"), &items, &grid, llm_acc, 0.9, exec)?;
    let file = PolicyFile {
        schema: POLICY_SCHEMA.into(),
        mode,
        model_checksum: predictor.model.checksum.clone(),
        policy: PolicyConfig { alpha: point.alpha, eta_hint: point.eta_hint, ..base },
        validation_accuracy: point.accuracy,
        validation_cost: point.cost,
        feasible: true,
    };
    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &file)?;
    w.flush()?;
    Ok(json!({
        "out": a.out,
        "alpha": point.alpha,
        "eta_hint": point.eta_hint,
        "validation_accuracy": point.accuracy,
        "validation_cost": point.cost,
        "llm_validation_accuracy": llm_acc,
        "llm_validation_cost": llm_cost,
        "min_cost_at_90pct_llm": min_cost,
    }))
}

fn evaluate_cmd(a: EvaluateArgs, exec: Exec) -> anyhow::Result<Value> {
    if let Some(t) = &a.from_paper_table {
        return evaluate_table(t, a.tolerance, a.out.as_deref(), exec);
    }
    let need = |p: &Option<PathBuf>, flag: &str| -> anyhow::Result<PathBuf> {
        p.clone().ok_or_else(|| CliError::new("missing_input", format!("evaluate needs {flag} (or --from-paper-table)")).into())
    };
    let (config, data, model, policy_path) =
        (need(&a.config, "--config")?, need(&a.data, "--data")?, need(&a.model, "--model")?, need(&a.policy, "--policy")?);
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("report.csv"));
    let cfg: BackendsConfig = load_json(&config)?;
    let (slm, llm) = cfg.build(&base_dir(&config))?;
    let cm = cfg.cost_model()?;
    let test = read_dataset(&data)?;
    if test.is_empty() {
        return Err(shepherd_core::Error::EmptyDataset.into());
    }
    let predictor = ShepherdPredictor::load(&model).with_context(|| format!("loading {}", model.display()))?;
    let pf = PolicyFile::load(&policy_path)?;
    if pf.model_checksum != predictor.model.checksum {
        bail!(CliError::new("config", "policy file was calibrated for a different model"));
    }
    pf.policy.validate()?;
    let judge = ExactMatchJudge::default();
    let ex = Executor::new(slm.as_ref(), llm.as_ref(), &judge, cm, pf.policy);
    let run = |f: &(dyn Fn(&LabeledExample) -> Result<Outcome, shepherd_core::policy::ExecutionError> + Sync)| {
        par::try_map(exec, &test, f).map_err(|e| CliError::new("backend", e.to_string()))
    };
    let slm_out = run(&|e| ex.run_decision(&e.query, StaticPolicy::SlmOnly.decide(e.full_llm_len), Rule::Static))?;
    let llm_out = run(&|e| ex.run_decision(&e.query, StaticPolicy::LlmOnly.decide(e.full_llm_len), Rule::Static))?;
    let oracle_out = run(&|e| ex.run_decision(&e.query, oracle_policy(e), Rule::Oracle))?;
    let learned = match pf.mode {
        FeatureMode::Proactive => Strategy::Proactive,
        FeatureMode::Reactive => Strategy::Reactive,
    };
    let policy_out = run(&|e| match pf.mode {
        FeatureMode::Proactive => ex.run_proactive(&e.query, &predictor),
        FeatureMode::Reactive => ex.run_reactive(&e.query, &predictor),
    })?;
    let results = vec![
        summarize_outcomes("SLM", "baseline", &slm_out),
        summarize_outcomes("LLM", "baseline", &llm_out),
        summarize_outcomes(&Strategy::Oracle.display_name(), Strategy::Oracle.group(), &oracle_out),
        summarize_outcomes(&learned.display_name(), learned.group(), &policy_out),
    ];
    let baselines = Baselines::from_results(&results[0], &results[1]);
    let rows = evaluate(&results, &baselines, exec);
    write_report(&out, &rows)?;
    if let Some(dir) = &a.outcomes_dir {
        for (name, o) in [("slm_only", &slm_out), ("llm_only", &llm_out), ("oracle", &oracle_out), (learned.to_string().as_str(), &policy_out)] {
            let mut w = create(&dir.join(format!("{name}.jsonl")))?;
            write_outcomes(&mut w, o)?;
            w.flush()?;
        }
    }
    eprint!("{}", rows_to_text(&rows));
    Ok(json!({ "out": out, "rows": rows }))
}

fn write_report(path: &Path, rows: &[ReportRow]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    rows_to_csv(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

fn evaluate_table(path: &Path, tolerance: Option<f64>, out: Option<&Path>, exec: Exec) -> anyhow::Result<Value> {
    let table = parse_paper_table(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    let checks = paper_table_checks(&table)?;
    let max_ace_err = checks.iter().filter_map(|c| c.ace_error()).fold(0.0, f64::max);
    let max_cr_err = checks.iter().filter_map(|c| c.cost_reduction_error()).fold(0.0, f64::max);
    if let Some(out) = out {
        let b = table.baselines()?;
        let results: Vec<_> = table
            .rows
            .iter()
            .map(|r| shepherd_core::metrics::StrategyResult {
                strategy: r.strategy.clone(),
                group: r.group.clone(),
                cost: Money::from_dollars(r.cost),
                accuracy: r.accuracy,
                n: 0,
            })
            .collect();
        write_report(out, &evaluate(&results, &b, exec))?;
    }
    for c in &checks {
        eprintln!(
            "{:<22} ace printed {:>6} computed {:>7} reachable {:<3} | cost red. printed {:>6} computed {:>7}",
            c.strategy,
            fmt_opt(c.printed_ace, 2),
            fmt_opt(c.computed_ace, 3),
            match c.printed_ace_reachable() {
                Some(true) => "yes",
                Some(false) => "no",
                None => "-",
            },
            fmt_opt(c.printed_cost_reduction, 1),
            fmt_opt(c.computed_cost_reduction, 2),
        );
    }
    let unreachable: Vec<&str> =
        checks.iter().filter(|c| c.printed_ace_reachable() == Some(false)).map(|c| c.strategy.as_str()).collect();
    let summary = json!({
        "table": path,
        "checks": checks,
        "printed_ace_unreachable": unreachable,
        "max_ace_error": max_ace_err,
        "max_cost_reduction_error": max_cr_err,
    });
    if let Some(tol) = tolerance {
        if max_ace_err > tol {
            return Err(CliError::new("tolerance_exceeded", format!("ACE deviates by {max_ace_err:.4} > {tol}"))
                .with_details(summary)
                .into());
        }
    }
    Ok(summary)
}

fn fmt_opt(x: Option<f64>, prec: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.prec$}"))
}

fn resolve_profile(name: &str, entry: Option<&str>) -> anyhow::Result<shepherd_core::labeling::TraceProfile> {
    let p = Path::new(name);
    if p.extension().is_some_and(|e| e == "json") || p.exists() {
        Ok(load_profile(p, entry)?)
    } else {
        Ok(preset(name)?)
    }
}

fn simulate(a: SimulateArgs, exec: Exec) -> anyhow::Result<Value> {
    let profile = resolve_profile(&a.profile, a.profile_name.as_deref())?;
    let cfg = match &a.config {
        Some(p) => load_json::<ExperimentConfig>(p)?,
        None => ExperimentConfig {
            policy: PolicyConfig::preset(&a.profile.to_ascii_lowercase()).unwrap_or_default(),
            ..ExperimentConfig::default()
        },
    };
    let strategies: Vec<Strategy> = a
        .strategies
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<Strategy>())
        .collect::<Result<_, _>>()?;
    if strategies.is_empty() {
        bail!(CliError::new("config", "no strategies given"));
    }
    let trace = generate_trace(&profile, a.n, a.seed, &cfg.generator, exec)?;
    let cm = CostModel::hosted_70b_free_slm();
    let report = run_experiment(&trace, &strategies, &cm, a.seed, &cfg, exec)?;
    write_report(&a.out, &report.rows)?;
    if let Some(p) = &a.report_json {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.flush()?;
    }
    eprint!("{}", rows_to_text(&report.rows));
    let dominance = report.dominance.as_ref().map(|d| {
        json!({
            "passed": d.route_equals_casc && d.shep_total <= d.route_total,
            "n": d.n,
            "route_total": d.route_total,
            "casc_total": d.casc_total,
            "shep_total": d.shep_total,
            "strict": d.strict,
            "boundary_mismatches": d.boundary_mismatches.len(),
        })
    });
    Ok(json!({
        "out": a.out,
        "n_queries": report.n_queries,
        "labeled": report.labeled,
        "dropped": report.dropped,
        "split": report.split,
        "dominance": dominance,
        "calibrations": report.calibrations,
        "decisions": report.decisions,
        "rows": report.rows,
    }))
}

fn stats(a: StatsArgs, exec: Exec) -> anyhow::Result<Value> {
    if let Some(d) = &a.data {
        let examples = read_dataset(d)?;
        return Ok(json!({ "data": d, "stats": dataset_stats(&examples)? }));
    }
    let Some(name) = &a.profile else {
        bail!(CliError::new("missing_input", "stats needs --data or --profile"));
    };
    let profile = resolve_profile(name, None)?;
    let trace = generate_trace(&profile, a.n, a.seed, &Default::default(), exec)?;
    let (p_zero, buckets, p_unsolvable) = trace_shares(&trace);
    Ok(json!({
        "profile": name,
        "n": a.n,
        "seed": a.seed,
        "observed": { "p_zero": p_zero, "bucket_masses": buckets, "p_unsolvable": p_unsolvable },
        "target": { "p_zero": profile.p_zero, "bucket_masses": profile.bucket_masses, "p_unsolvable": profile.p_unsolvable },
    }))
}

/// Resolves the gateway config, applying a calibrated policy file when one
/// is referenced.
pub fn load_gateway(config: &Path) -> anyhow::Result<Gateway> {
    let mut cfg: GatewayConfig = load_json(config)?;
    let base = base_dir(config);
    if let Some(pf) = &cfg.policy_file {
        let pf = PolicyFile::load(&base.join(pf))?;
        cfg.policy = pf.policy;
    }
    Gateway::from_config(&cfg, &base).map_err(|e| CliError::new("startup", format!("refusing to start: {e:#}")).into())
}

fn serve(a: ServeArgs) -> anyhow::Result<Value> {
    let gw = Arc::new(load_gateway(&a.config)?);
    let listen = match &a.listen {
        Some(l) => l.clone(),
        None => load_json::<GatewayConfig>(&a.config)?.listen,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(gateway::serve(gw.clone(), &listen))?;
    let m = gw.metrics();
    Ok(json!({ "stopped": true, "served": m.served, "cost_usd": m.cost }))
}
