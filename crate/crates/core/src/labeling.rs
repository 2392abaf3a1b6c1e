//! Supervision labels: the minimum sufficient hint size of each query.
//!
//! For every query the LLM's greedy answer is fetched once, hints are cut at
//! `p%` of its length for `p = 0, step, ..., 90`, and the SLM is re-run on each
//! hinted prompt. The smallest passing budget is the label. When nothing up to
//! 90% passes, the query is marked unsolvable and labeled with the full length.

use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::answer::QualityJudge;
use crate::backends::{generate, Backend, BackendKind, RoleUsage, UsageLedger};
use crate::error::{Error, Result};
use crate::money::CostModel;
use crate::par::{self, Exec};
use crate::predictor::features::{summarize_samples, SampleSummary};
use crate::prompt::render_prompt;
use crate::tokens::{DecodingParams, PieceTokenizer, Query, Tokenizer};

pub const LABEL_SCHEMA: &str = "shepherd-label/1";
pub const DEFAULT_STEP_PCT: u32 = 10;
pub const DEFAULT_OUTLIER_THRESHOLD: usize = 5;
/// Grid of ten budgets plus the full-response configuration.
pub const OUTLIER_CONFIGS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub query: Query,
    /// `|q|` in tokens (question only, without prompt template).
    pub query_len: usize,
    /// `|h_l(q)|`: length of the LLM's greedy answer.
    pub full_llm_len: usize,
    pub step_pct: u32,
    /// Hint budgets, ascending and deduplicated.
    pub grid: Vec<usize>,
    /// Smallest percentage producing each grid budget.
    pub grid_pct: Vec<u32>,
    pub per_budget_correct: Vec<bool>,
    /// SLM correctness when handed the whole LLM answer as the hint.
    pub full_hint_correct: bool,
    /// Whether the LLM's own answer is correct.
    pub llm_correct: bool,
    pub n_star: usize,
    pub y: bool,
    pub r: f64,
    pub unsolvable: bool,
    pub outlier_count: usize,
    /// `|h_s(q)|`, the unhinted SLM answer length.
    pub slm_output_len: usize,
    /// `|h_s^{(n*)}(q)|`, the SLM answer length at the label budget.
    pub shepherd_output_len: usize,
    /// Sampled SLM answers for reactive features, when collected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<SampleSummary>>,
}

impl LabeledExample {
    /// `I_s(q)`: the SLM alone is satisfactory.
    pub fn slm_alone_ok(&self) -> bool {
        self.n_star == 0
    }

    /// Percentage bucket of the label, `None` for unsolvable examples.
    pub fn label_pct(&self) -> Option<u32> {
        if self.unsolvable {
            return None;
        }
        self.grid.iter().position(|&g| g == self.n_star).map(|i| self.grid_pct[i])
    }

    /// SLM correctness with a hint of `n` tokens, read off the grid: the flag
    /// of the largest grid budget not above `n`, or the full-hint flag once
    /// `n` reaches the full length.
    pub fn correct_with_hint(&self, n: usize) -> bool {
        if n >= self.full_llm_len {
            return self.full_hint_correct;
        }
        match self.grid.iter().rposition(|&g| g <= n) {
            Some(i) => self.per_budget_correct[i],
            None => false,
        }
    }
}

/// `floor(p * full_len / 100)` for `p = 0, step, ..., <= 90`, deduplicated.
pub fn grid_sizes(full_len: usize, step_pct: u32) -> Result<Vec<usize>> {
    Ok(grid_with_pct(full_len, step_pct)?.into_iter().map(|(n, _)| n).collect())
}

fn grid_with_pct(full_len: usize, step_pct: u32) -> Result<Vec<(usize, u32)>> {
    if !matches!(step_pct, 5 | 10 | 20 | 25) {
        return Err(Error::InvalidGridStep(step_pct));
    }
    let mut out: Vec<(usize, u32)> = Vec::new();
    for p in (0..=90).step_by(step_pct as usize) {
        let n = p as usize * full_len / 100;
        if out.last().is_none_or(|&(last, _)| n > last) {
            out.push((n, p));
        }
    }
    Ok(out)
}

/// Size of the minority class among the flags.
pub fn minority_count(flags: &[bool]) -> usize {
    let t = flags.iter().filter(|&&f| f).count();
    t.min(flags.len() - t)
}

/// Outlier count over the eleven hint configurations.
pub fn outlier_count(flags: &[bool]) -> Result<usize> {
    if flags.len() != OUTLIER_CONFIGS {
        return Err(Error::WrongArity { expected: OUTLIER_CONFIGS, got: flags.len() });
    }
    Ok(minority_count(flags))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub k: usize,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { k: 3, temperature: 0.3, top_p: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub step_pct: u32,
    pub n_max: usize,
    /// Also collect `k` sampled SLM answers per query.
    #[serde(default)]
    pub reactive: Option<SamplingConfig>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { step_pct: DEFAULT_STEP_PCT, n_max: 4096, reactive: None }
    }
}

/// Labels one query. All calls use greedy decoding except the optional
/// reactive samples, which use seeds `1..=k`.
pub fn label_query(
    q: &Query,
    slm: &dyn Backend,
    llm: &dyn Backend,
    judge: &dyn QualityJudge,
    cfg: &LabelConfig,
    ledger: &mut UsageLedger,
) -> Result<LabeledExample> {
    if q.ground_truth.is_none() {
        return Err(Error::MissingGroundTruth(q.id.clone()));
    }
    let tok = PieceTokenizer;
    let bare = tok.tokenize(&render_prompt(q.text(), None));
    let greedy_full = DecodingParams::deterministic(cfg.n_max);
    let reference = generate(llm, &bare, &greedy_full, cfg.n_max, ledger)?;
    let full_llm_len = reference.tokens.len();
    if full_llm_len == 0 {
        return Err(Error::InvalidParams(format!("empty LLM reference for query `{}`", q.id)));
    }
    let llm_correct = judge.satisfactory(q, &reference.text);
    let slice_locally = llm.spec().kind == BackendKind::Mock;

    let slm_run = |hint: Option<&str>, ledger: &mut UsageLedger| -> Result<(bool, usize)> {
        let prompt = tok.tokenize(&render_prompt(q.text(), hint));
        let out = generate(slm, &prompt, &greedy_full, cfg.n_max, ledger)?;
        Ok((judge.satisfactory(q, &out.text), out.tokens.len()))
    };

    let grid = grid_with_pct(full_llm_len, cfg.step_pct)?;
    let mut per_budget_correct = Vec::with_capacity(grid.len());
    let mut out_lens = Vec::with_capacity(grid.len());
    for &(n, _) in &grid {
        let hint = if n == 0 {
            None
        } else if slice_locally {
            Some(reference.tokens.prefix(n)?.text().to_string())
        } else {
            Some(generate(llm, &bare, &DecodingParams::deterministic(n), cfg.n_max, ledger)?.text)
        };
        let (ok, len) = slm_run(hint.as_deref(), ledger)?;
        per_budget_correct.push(ok);
        out_lens.push(len);
    }
    let (full_hint_correct, full_hint_len) = slm_run(Some(&reference.text), ledger)?;

    let first = per_budget_correct.iter().position(|&c| c);
    let (n_star, unsolvable, shepherd_output_len) = match first {
        Some(i) => (grid[i].0, false, out_lens[i]),
        None => (full_llm_len, true, full_hint_len),
    };
    let mut flags = per_budget_correct.clone();
    flags.push(full_hint_correct);

    let samples = match cfg.reactive {
        Some(s) if s.k > 0 => {
            let mut results = Vec::with_capacity(s.k);
            for seed in 1..=s.k as u64 {
                let p = DecodingParams::sampled(s.temperature, s.top_p, cfg.n_max, seed);
                results.push(generate(slm, &bare, &p, cfg.n_max, ledger)?);
            }
            Some(summarize_samples(&results, q.task_kind))
        }
        _ => None,
    };

    Ok(LabeledExample {
        query: q.clone(),
        query_len: q.prompt.len(),
        full_llm_len,
        step_pct: cfg.step_pct,
        grid: grid.iter().map(|g| g.0).collect(),
        grid_pct: grid.iter().map(|g| g.1).collect(),
        per_budget_correct,
        full_hint_correct,
        llm_correct,
        n_star,
        y: n_star > 0,
        r: (n_star as f64).ln_1p(),
        unsolvable,
        outlier_count: minority_count(&flags),
        slm_output_len: out_lens[0],
        shepherd_output_len,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedQuery {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LabelingRun {
    pub examples: Vec<LabeledExample>,
    pub skipped: Vec<SkippedQuery>,
    pub usage: RoleUsage,
}

/// Labels queries independently and merges results in input order.
/// Failing queries are skipped and reported rather than aborting the run.
pub fn label_dataset(
    queries: &[Query],
    slm: &dyn Backend,
    llm: &dyn Backend,
    judge: &dyn QualityJudge,
    cfg: &LabelConfig,
    cost: CostModel,
    exec: Exec,
) -> LabelingRun {
    let results = par::map(exec, queries, |q| {
        let mut ledger = UsageLedger::totals_only(cost);
        let r = label_query(q, slm, llm, judge, cfg, &mut ledger);
        (r, *ledger.totals())
    });
    let mut run = LabelingRun { examples: Vec::new(), skipped: Vec::new(), usage: RoleUsage::default() };
    for (q, (r, usage)) in queries.iter().zip(results) {
        run.usage.merge(&usage);
        match r {
            Ok(ex) => run.examples.push(ex),
            Err(e) => {
                warn!("skipping query {}: {e}", q.id);
                run.skipped.push(SkippedQuery { id: q.id.clone(), reason: e.to_string() });
            }
        }
    }
    run
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    LlmIncorrectNoHintHelps,
    Outlier,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::LlmIncorrectNoHintHelps => "llm_incorrect_no_hint_helps",
            DropReason::Outlier => "outlier",
        }
    }
}

/// Drops unsolvable examples whose LLM answer is also wrong, then examples
/// whose outlier count reaches `outlier_threshold`.
pub fn filter_dataset(
    examples: Vec<LabeledExample>,
    outlier_threshold: usize,
) -> (Vec<LabeledExample>, Vec<(LabeledExample, DropReason)>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for ex in examples {
        if ex.unsolvable && !ex.llm_correct {
            dropped.push((ex, DropReason::LlmIncorrectNoHintHelps));
        } else if ex.outlier_count >= outlier_threshold {
            dropped.push((ex, DropReason::Outlier));
        } else {
            kept.push(ex);
        }
    }
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n: usize,
    pub p_zero: f64,
    /// Mass of labels at 10%, 20%, ..., 90% of the LLM answer length.
    pub bucket_masses: [f64; 9],
    pub p_unsolvable: f64,
    /// Mean and standard deviation of positive (solvable) hint sizes in tokens.
    pub positive_mean: f64,
    pub positive_std: f64,
}

pub fn dataset_stats(examples: &[LabeledExample]) -> Result<DatasetStats> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = examples.len() as f64;
    let mut zero = 0usize;
    let mut unsolvable = 0usize;
    let mut buckets = [0usize; 9];
    let mut positives = Vec::new();
    for ex in examples {
        if ex.unsolvable {
            unsolvable += 1;
        } else if ex.n_star == 0 {
            zero += 1;
        } else {
            positives.push(ex.n_star as f64);
            if let Some(p) = ex.label_pct() {
                // 5% steps round up into the next 10% bucket
                let b = (p.div_ceil(10) as usize).clamp(1, 9);
                buckets[b - 1] += 1;
            }
        }
    }
    let (positive_mean, positive_std) = if positives.is_empty() {
        (0.0, 0.0)
    } else {
        let m = positives.iter().sum::<f64>() / positives.len() as f64;
        let v = positives.iter().map(|x| (x - m).powi(2)).sum::<f64>() / positives.len() as f64;
        (m, v.sqrt())
    };
    Ok(DatasetStats {
        n: examples.len(),
        p_zero: zero as f64 / n,
        bucket_masses: buckets.map(|c| c as f64 / n),
        p_unsolvable: unsolvable as f64 / n,
        positive_mean,
        positive_std,
    })
}

/// Log-normal length distribution given by its median and log-scale sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub median: f64,
    pub sigma: f64,
    pub min: usize,
    pub max: usize,
}

/// Shape of the minimum-hint-size distribution of a workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceProfile {
    pub name: String,
    pub p_zero: f64,
    /// Masses for labels at 10%, 20%, ..., 90%.
    pub bucket_masses: [f64; 9],
    pub p_unsolvable: f64,
    pub query_len: LengthDist,
    pub llm_len: LengthDist,
}

impl TraceProfile {
    pub fn total_mass(&self) -> f64 {
        self.p_zero + self.p_unsolvable + self.bucket_masses.iter().sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.p_zero)
            .chain(std::iter::once(self.p_unsolvable))
            .chain(self.bucket_masses.iter().copied());
        for m in all {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::InvalidProfile(format!("mass {m} outside [0, 1]")));
            }
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProfile(format!("masses sum to {total}, expected 1")));
        }
        for d in [&self.query_len, &self.llm_len] {
            if !(d.median > 0.0 && d.sigma >= 0.0 && d.min >= 1 && d.min <= d.max) {
                return Err(Error::InvalidProfile(format!("bad length distribution {d:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    schema: &'a str,
    #[serde(flatten)]
    example: &'a LabeledExample,
}

/// Parses one JSONL record, checking its `schema` tag before the fields.
pub(crate) fn parse_record<T: serde::de::DeserializeOwned>(line: &str, expected: &str) -> Result<T> {
    let v: serde_json::Value = serde_json::from_str(line)?;
    let found = v.get("schema").and_then(|s| s.as_str()).unwrap_or("");
    if found != expected {
        return Err(Error::Schema { expected: expected.into(), found: found.into() });
    }
    Ok(serde_json::from_value(v)?)
}

pub fn write_jsonl<W: Write>(mut w: W, examples: &[LabeledExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, &RecordOut { schema: LABEL_SCHEMA, example: ex })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, LABEL_SCHEMA)?);
    }
    Ok(out)
}
