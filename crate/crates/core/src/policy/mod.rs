//! Decisions and their execution.
//!
//! A prediction maps to one of three actions: let the SLM answer alone, ask
//! the LLM for an `n`-token hint and let the SLM finish, or return the LLM's
//! full answer. Reactive mode first samples the SLM `K` times and only
//! consults the predictor when fewer than `k` answers agree.

mod exec;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use crate::answer::extract_answer;
use crate::error::{Error, Result};
use crate::labeling::LabeledExample;
use crate::predictor::features::modal_answer;
use crate::predictor::Prediction;
pub use exec::{ExecutionError, Executor, Outcome};

pub const EVAL_SCHEMA: &str = "shepherd-eval/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "snake_case")]
pub enum Decision {
    SlmOnly,
    Hint(usize),
    FullLlm,
}

impl Decision {
    /// Value of the `x-shepherd-decision` header.
    pub fn header_value(&self) -> String {
        match self {
            Decision::SlmOnly => "slm_only".into(),
            Decision::Hint(n) => format!("hint; n={n}"),
            Decision::FullLlm => "full_llm".into(),
        }
    }

    pub fn variant(&self) -> &'static str {
        match self {
            Decision::SlmOnly => "slm_only",
            Decision::Hint(_) => "hint",
            Decision::FullLlm => "full_llm",
        }
    }

    pub fn hint_tokens(&self) -> usize {
        match self {
            Decision::Hint(n) => *n,
            _ => 0,
        }
    }
}

/// Which rule produced a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// `P(q) < α`.
    BelowAlpha,
    /// Predicted size rounds to zero.
    ZeroSize,
    /// `0 < n̂ ≤ η_hint`.
    WithinEta,
    /// `n̂ > η_hint`.
    AboveEta,
    /// `k` of `K` SLM samples agreed.
    Consensus,
    Oracle,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub alpha: f64,
    pub eta_hint: usize,
    pub n_max: usize,
    /// `K`, the number of SLM samples in reactive mode.
    pub samples: usize,
    /// `k`, the agreement quorum.
    pub quorum: usize,
    pub sample_temperature: f64,
    pub sample_top_p: f64,
    /// Dropout passes averaged by the predictor.
    pub passes: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            eta_hint: 60,
            n_max: 4096,
            samples: 3,
            quorum: 2,
            sample_temperature: 0.3,
            sample_top_p: 0.95,
            passes: 8,
        }
    }
}

impl PolicyConfig {
    /// Per-dataset settings from the reference configuration table.
    pub fn preset(name: &str) -> Option<Self> {
        let (alpha, eta_hint, samples) = match name {
            "gsm8k" => (0.228, 58, 3),
            "cnk12" => (0.349, 60, 2),
            "humaneval" => (0.228, 110, 2),
            "mbpp" => (0.372, 130, 2),
            _ => return None,
        };
        Some(Self { alpha, eta_hint, samples, quorum: 2.min(samples), ..Self::default() })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("policy config: {m}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.eta_hint > self.n_max {
            return bad(format!("eta_hint {} exceeds n_max {}", self.eta_hint, self.n_max));
        }
        if self.quorum == 0 || self.quorum > self.samples {
            return bad(format!("need 1 <= k <= K, got k={} K={}", self.quorum, self.samples));
        }
        if self.sample_temperature < 0.0 || !(self.sample_top_p > 0.0 && self.sample_top_p <= 1.0) {
            return bad("bad sampling parameters".into());
        }
        if self.passes == 0 {
            return bad("passes must be positive".into());
        }
        Ok(())
    }
}

/// `round(clip(exp(r̂) − 1, 0, N_max))`, with `r̂` capped at `ln(1 + N_max)`
/// so the exponential cannot overflow.
pub fn predicted_size(size_log: f64, n_max: usize) -> usize {
    let cap = (n_max as f64).ln_1p();
    let r = if size_log.is_nan() { 0.0 } else { size_log.min(cap) };
    (r.exp() - 1.0).clamp(0.0, n_max as f64).round() as usize
}

pub fn map_to_decision(pred: &Prediction, cfg: &PolicyConfig) -> (Decision, Rule) {
    if pred.hint_prob < cfg.alpha {
        return (Decision::SlmOnly, Rule::BelowAlpha);
    }
    match predicted_size(pred.size_log, cfg.n_max) {
        0 => (Decision::SlmOnly, Rule::ZeroSize),
        n if n <= cfg.eta_hint => (Decision::Hint(n), Rule::WithinEta),
        _ => (Decision::FullLlm, Rule::AboveEta),
    }
}

/// The modal non-empty answer if it occurs at least `k` times.
pub fn consensus<S: AsRef<str>>(answers: &[S], k: usize) -> Option<&str> {
    let m = modal_answer(answers)?;
    let count = answers.iter().filter(|a| a.as_ref() == m).count();
    (count >= k.max(1)).then_some(m)
}

/// The decision an oracle knowing `n*` would make.
pub fn oracle_policy(ex: &LabeledExample) -> Decision {
    if ex.unsolvable {
        Decision::FullLlm
    } else if ex.n_star == 0 {
        Decision::SlmOnly
    } else {
        Decision::Hint(ex.n_star)
    }
}

/// Reference policies that ignore the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "p", rename_all = "snake_case")]
pub enum StaticPolicy {
    SlmOnly,
    LlmOnly,
    /// Hint of `floor(p · |h_l|)` tokens, `p` in percent.
    FixedFraction(u32),
}

impl StaticPolicy {
    pub fn decide(&self, full_llm_len: usize) -> Decision {
        match *self {
            StaticPolicy::SlmOnly => Decision::SlmOnly,
            StaticPolicy::LlmOnly => Decision::FullLlm,
            StaticPolicy::FixedFraction(p) => match p as usize * full_llm_len / 100 {
                0 => Decision::SlmOnly,
                n => Decision::Hint(n),
            },
        }
    }
}

#[derive(Serialize)]
struct OutcomeOut<'a> {
    schema: &'a str,
    #[serde(flatten)]
    outcome: &'a Outcome,
}

pub fn write_outcomes<W: Write>(mut w: W, outcomes: &[Outcome]) -> Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut w, &OutcomeOut { schema: EVAL_SCHEMA, outcome: o })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_outcomes<R: BufRead>(r: R) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(crate::labeling::parse_record(&line, EVAL_SCHEMA)?);
    }
    Ok(out)
}
