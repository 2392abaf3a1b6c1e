use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_mocks, GeneratorConfig, SyntheticQuery};
use crate::answer::{extract_answer, ExactMatchJudge};
use crate::backends::RoleUsage;
use crate::error::{Error, Result};
use crate::labeling::{
    dataset_stats, filter_dataset, label_dataset, DatasetStats, DropReason, LabelConfig, LabeledExample, SamplingConfig,
    DEFAULT_OUTLIER_THRESHOLD,
};
use crate::metrics::{
    calibrate, dominance_check, evaluate, min_cost_at_accuracy, summarize_outcomes, Baselines, Calibration,
    CalibrationGrid, CalibrationMode, DominanceReport, MinCostEntry, ReportRow, RescoreItem, StrategyResult,
};
use crate::money::{CostModel, Money};
use crate::par::{self, Exec};
use crate::policy::{consensus, oracle_policy, Executor, Outcome, PolicyConfig, Rule, StaticPolicy};
use crate::predictor::embed::{EmbedderRegistry, HASHED_NGRAM_ID};
use crate::predictor::features::FeatureMode;
use crate::predictor::train::{train, TrainConfig, TrainingExample};
use crate::predictor::{HintPredictor, ShepherdPredictor};
use crate::prompt::render_prompt;
use crate::tokens::{PieceTokenizer, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    LlmOnly,
    SlmOnly,
    Oracle,
    Proactive,
    Reactive,
    /// Hint of a fixed percentage of every LLM answer.
    Fixed(u32),
}

impl Strategy {
    pub fn display_name(&self) -> String {
        match self {
            Strategy::LlmOnly => "LLM".into(),
            Strategy::SlmOnly => "SLM".into(),
            Strategy::Oracle => "Oracle Shep.".into(),
            Strategy::Proactive => "Proactive Shep.".into(),
            Strategy::Reactive => "Reactive Shep.".into(),
            Strategy::Fixed(p) => format!("Fixed {p}% hint"),
        }
    }

    pub fn group(&self) -> &'static str {
        match self {
            Strategy::LlmOnly | Strategy::SlmOnly => "baseline",
            Strategy::Oracle => "oracle",
            Strategy::Proactive => "routing",
            Strategy::Reactive => "cascading",
            Strategy::Fixed(_) => "static",
        }
    }

    fn mode(&self) -> Option<FeatureMode> {
        match self {
            Strategy::Proactive => Some(FeatureMode::Proactive),
            Strategy::Reactive => Some(FeatureMode::Reactive),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::LlmOnly => f.write_str("llm_only"),
            Strategy::SlmOnly => f.write_str("slm_only"),
            Strategy::Oracle => f.write_str("oracle"),
            Strategy::Proactive => f.write_str("proactive"),
            Strategy::Reactive => f.write_str("reactive"),
            Strategy::Fixed(p) => write!(f, "fixed:{p}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "llm_only" | "llm" => Strategy::LlmOnly,
            "slm_only" | "slm" => Strategy::SlmOnly,
            "oracle" => Strategy::Oracle,
            "proactive" => Strategy::Proactive,
            "reactive" => Strategy::Reactive,
            other => match other.strip_prefix("fixed:").map(str::parse::<u32>) {
                Some(Ok(p)) if p <= 100 => Strategy::Fixed(p),
                _ => return Err(Error::Config(format!("unknown strategy `{other}`"))),
            },
        })
    }
}

/// How `(α, η_hint)` are chosen for the learned strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum CalibrationTarget {
    /// Cheapest point reaching this share of the LLM's validation accuracy.
    AccuracyFraction(f64),
    /// Most accurate point costing at most this share of the LLM.
    BudgetFraction(f64),
    /// Keep the thresholds of the policy config.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub step_pct: u32,
    pub n_max: usize,
    pub outlier_threshold: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub calibration: CalibrationTarget,
    pub embed_dim: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            step_pct: 10,
            n_max: 4096,
            outlier_threshold: DEFAULT_OUTLIER_THRESHOLD,
            train_fraction: 0.6,
            val_fraction: 0.2,
            train: TrainConfig { epochs: 20, ..TrainConfig::default() },
            policy: PolicyConfig::default(),
            calibration: CalibrationTarget::AccuracyFraction(0.9),
            embed_dim: 64,
        }
    }
}

/// Thresholds picked for one learned strategy on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCalibration {
    pub strategy: String,
    pub alpha: f64,
    pub eta_hint: usize,
    pub val_accuracy: f64,
    pub val_cost: Money,
    /// False when the target was out of reach and the most accurate frontier
    /// point was used instead.
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n_queries: usize,
    pub labeled: usize,
    pub skipped: usize,
    pub dropped: BTreeMap<String, usize>,
    /// Train, validation, test.
    pub split: [usize; 3],
    pub label_stats: Option<DatasetStats>,
    pub calibrations: Vec<ModeCalibration>,
    pub min_cost: Vec<MinCostEntry>,
    pub results: Vec<StrategyResult>,
    pub rows: Vec<ReportRow>,
    /// Decision counts per strategy.
    pub decisions: BTreeMap<String, BTreeMap<String, usize>>,
    pub dominance: Option<DominanceReport>,
    pub labeling_usage: RoleUsage,
}

impl ExperimentReport {
    fn empty(n: usize) -> Self {
        Self {
            n_queries: n,
            labeled: 0,
            skipped: 0,
            dropped: BTreeMap::new(),
            split: [0; 3],
            label_stats: None,
            calibrations: Vec::new(),
            min_cost: Vec::new(),
            results: Vec::new(),
            rows: Vec::new(),
            decisions: BTreeMap::new(),
            dominance: None,
            labeling_usage: RoleUsage::default(),
        }
    }
}

/// Seeded shuffle into train, validation and test parts.
pub fn split_dataset(mut examples: Vec<LabeledExample>, train_fraction: f64, val_fraction: f64, seed: u64) -> Result<[Vec<LabeledExample>; 3]> {
    let (tf, vf) = (train_fraction, val_fraction);
    if !(tf > 0.0 && vf >= 0.0 && tf + vf <= 1.0) {
        return Err(Error::Config(format!("bad split fractions train={tf} val={vf}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917);
    examples.shuffle(&mut rng);
    let n = examples.len();
    let n_train = (n as f64 * tf).round() as usize;
    let n_val = (n as f64 * vf).round() as usize;
    let test = examples.split_off((n_train + n_val).min(n));
    let val = examples.split_off(n_train.min(examples.len()));
    Ok([examples, val, test])
}

fn exec_err(e: crate::policy::ExecutionError) -> Error {
    Error::Config(format!("execution failed: {e}"))
}

/// Validation items for re-scoring, using the labeled samples for the
/// reactive quorum.
pub fn rescore_items(
    val: &[LabeledExample],
    predictor: &dyn HintPredictor,
    mode: FeatureMode,
    policy: &PolicyConfig,
    cm: &CostModel,
    exec: Exec,
) -> Result<Vec<RescoreItem>> {
    par::try_map(exec, val, |ex| {
        let samples = ex.samples.as_deref();
        let pred = predictor.predict(&ex.query, if mode == FeatureMode::Reactive { samples } else { None })?;
        let item = RescoreItem::from_example(ex, &pred, cm, policy.n_max)?;
        if mode == FeatureMode::Proactive {
            return Ok(item);
        }
        let s = samples.ok_or(Error::NoSamples)?;
        let answers: Vec<&str> = s.iter().map(|x| x.answer.as_str()).collect();
        let truth = ex.query.ground_truth.as_deref().map(|t| extract_answer(t, ex.query.task_kind));
        let agreed = consensus(&answers, policy.quorum).map(|a| Some(a) == truth.as_deref());
        let prompt_len = PieceTokenizer.count(&render_prompt(ex.query.text(), None)) as u64;
        let out: u64 = s.iter().map(|x| x.output_len as u64).sum();
        Ok(item.with_samples(cm.slm_charge(prompt_len * s.len() as u64, out), agreed))
    })
}

fn calibrate_mode(
    name: &str,
    items: &[RescoreItem],
    val: &[LabeledExample],
    cfg: &ExperimentConfig,
    cm: &CostModel,
    exec: Exec,
) -> Result<(PolicyConfig, ModeCalibration, MinCostEntry)> {
    let grid = CalibrationGrid::standard(cfg.policy.n_max);
    let llm_acc = val.iter().filter(|e| e.llm_correct).count() as f64 / val.len() as f64;
    let llm_cost: Money = val.iter().map(|e| cm.llm_charge(e.query_len as u64, e.full_llm_len as u64)).sum();
    let mode = match cfg.calibration {
        CalibrationTarget::AccuracyFraction(f) => Some(CalibrationMode::AccuracyFloor(llm_acc * f)),
        CalibrationTarget::BudgetFraction(f) => Some(CalibrationMode::Budget(Money::from_dollars(llm_cost.dollars() * f))),
        CalibrationTarget::Fixed => None,
    };
    let min_cost = min_cost_at_accuracy(name, items, &grid, llm_acc, 0.9, exec)?;
    let (policy, cal) = match mode {
        None => {
            let (mut correct, mut cost) = (0usize, Money::ZERO);
            for it in items {
                let (ok, c) = it.score(cfg.policy.alpha, cfg.policy.eta_hint);
                correct += ok as usize;
                cost += c;
            }
            let cal = ModeCalibration {
                strategy: name.into(),
                alpha: cfg.policy.alpha,
                eta_hint: cfg.policy.eta_hint,
                val_accuracy: correct as f64 / items.len() as f64,
                val_cost: cost,
                feasible: true,
            };
            (cfg.policy, cal)
        }
        Some(mode) => {
            let (p, feasible) = match calibrate(items, &grid, mode, exec)? {
                Calibration::Feasible(p) => (p, true),
                Calibration::Infeasible { frontier } => {
                    let top = *frontier.last().ok_or(Error::EmptyDataset)?;
                    log::warn!("{name}: calibration target out of reach, using the most accurate frontier point");
                    (top, false)
                }
            };
            let cal = ModeCalibration {
                strategy: name.into(),
                alpha: p.alpha,
                eta_hint: p.eta_hint,
                val_accuracy: p.accuracy,
                val_cost: p.cost,
                feasible,
            };
            (PolicyConfig { alpha: p.alpha, eta_hint: p.eta_hint, ..cfg.policy }, cal)
        }
    };
    Ok((policy, cal, min_cost))
}

fn histogram(outcomes: &[Outcome]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for o in outcomes {
        *h.entry(o.decision.variant().to_string()).or_default() += 1;
    }
    h
}

/// Labels the trace against its scripted doubles, filters, splits, trains
/// and calibrates the learned strategies, runs every strategy on the test
/// split and reports them next to the oracle dominance check.
pub fn run_experiment(
    trace: &[SyntheticQuery],
    strategies: &[Strategy],
    cm: &CostModel,
    seed: u64,
    cfg: &ExperimentConfig,
    exec: Exec,
) -> Result<ExperimentReport> {
    cfg.policy.validate()?;
    if trace.is_empty() {
        return Ok(ExperimentReport::empty(0));
    }
    let (slm, llm) = build_mocks(trace, exec);
    let judge = ExactMatchJudge::default();
    let label_cfg = LabelConfig {
        step_pct: cfg.step_pct,
        n_max: cfg.n_max,
        reactive: Some(SamplingConfig {
            k: cfg.policy.samples,
            temperature: cfg.policy.sample_temperature,
            top_p: cfg.policy.sample_top_p,
        }),
    };
    let queries: Vec<_> = trace.iter().map(|s| s.query.clone()).collect();
    let run = label_dataset(&queries, &slm, &llm, &judge, &label_cfg, *cm, exec);
    let mut report = ExperimentReport::empty(trace.len());
    report.labeled = run.examples.len();
    report.skipped = run.skipped.len();
    report.labeling_usage = run.usage;

    let (kept, dropped) = filter_dataset(run.examples, cfg.outlier_threshold);
    for reason in [DropReason::LlmIncorrectNoHintHelps, DropReason::Outlier] {
        report.dropped.insert(reason.as_str().into(), dropped.iter().filter(|(_, r)| *r == reason).count());
    }
    if kept.is_empty() {
        return Ok(report);
    }
    report.label_stats = Some(dataset_stats(&kept)?);
    if cm.slm_is_free() {
        report.dominance = Some(dominance_check(&kept, cm, exec)?);
    }

    let [train_set, val_set, test_set] = split_dataset(kept, cfg.train_fraction, cfg.val_fraction, seed)?;
    report.split = [train_set.len(), val_set.len(), test_set.len()];
    if test_set.is_empty() {
        return Ok(report);
    }

    let registry = EmbedderRegistry::default();
    let embedder = registry.resolve(HASHED_NGRAM_ID, cfg.embed_dim)?;
    let mut learned: BTreeMap<Strategy, (ShepherdPredictor, PolicyConfig)> = BTreeMap::new();
    for s in strategies {
        let Some(mode) = s.mode() else { continue };
        if learned.contains_key(s) {
            continue;
        }
        let tcfg = TrainConfig { mode, seed, passes: cfg.policy.passes, ..cfg.train };
        let to_ex = |v: &[LabeledExample]| -> Result<Vec<TrainingExample>> {
            v.iter().filter(|e| !e.unsolvable).map(|e| TrainingExample::from_labeled(e, mode)).collect()
        };
        let (model, _) = train(&to_ex(&train_set)?, &to_ex(&val_set)?, embedder.as_ref(), &tcfg)?;
        let predictor = ShepherdPredictor::new(model, &registry)?;
        let calib_set: &[LabeledExample] = if val_set.is_empty() { &train_set } else { &val_set };
        let items = rescore_items(calib_set, &predictor, mode, &cfg.policy, cm, exec)?;
        let (policy, cal, min_cost) = calibrate_mode(&s.to_string(), &items, calib_set, cfg, cm, exec)?;
        report.calibrations.push(cal);
        report.min_cost.push(min_cost);
        learned.insert(*s, (predictor, policy));
    }

    let run_strategy = |s: Strategy| -> Result<Vec<Outcome>> {
        let base = Executor::new(&slm, &llm, &judge, *cm, cfg.policy);
        match s {
            Strategy::LlmOnly | Strategy::SlmOnly | Strategy::Fixed(_) => {
                let sp = match s {
                    Strategy::LlmOnly => StaticPolicy::LlmOnly,
                    Strategy::SlmOnly => StaticPolicy::SlmOnly,
                    Strategy::Fixed(p) => StaticPolicy::FixedFraction(p),
                    _ => unreachable!(),
                };
                par::try_map(exec, &test_set, |ex| base.run_decision(&ex.query, sp.decide(ex.full_llm_len), Rule::Static))
                    .map_err(exec_err)
            }
            Strategy::Oracle => par::try_map(exec, &test_set, |ex| base.run_decision(&ex.query, oracle_policy(ex), Rule::Oracle))
                .map_err(exec_err),
            Strategy::Proactive | Strategy::Reactive => {
                let (predictor, policy) = &learned[&s];
                let ex = Executor::new(&slm, &llm, &judge, *cm, *policy);
                par::try_map(exec, &test_set, |e| {
                    if s == Strategy::Proactive {
                        ex.run_proactive(&e.query, predictor)
                    } else {
                        ex.run_reactive(&e.query, predictor)
                    }
                })
                .map_err(exec_err)
            }
        }
    };

    let slm_base = summarize_outcomes("SLM", "baseline", &run_strategy(Strategy::SlmOnly)?);
    let llm_base = summarize_outcomes("LLM", "baseline", &run_strategy(Strategy::LlmOnly)?);
    let baselines = Baselines::from_results(&slm_base, &llm_base);
    for s in strategies {
        let outcomes = run_strategy(*s)?;
        report.decisions.insert(s.to_string(), histogram(&outcomes));
        report.results.push(summarize_outcomes(&s.display_name(), s.group(), &outcomes));
    }
    report.rows = evaluate(&report.results, &baselines, exec);
    Ok(report)
}

impl ExperimentReport {
    /// Outcome counts of the oracle row when it ran.
    pub fn oracle_decisions(&self) -> Option<&BTreeMap<String, usize>> {
        self.decisions.get(&Strategy::Oracle.to_string())
    }
}
