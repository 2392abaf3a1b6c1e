use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{consensus, map_to_decision, Decision, PolicyConfig, Rule};
use crate::answer::{extract_answer, QualityJudge};
use crate::backends::{generate, Backend, GenerationResult, RoleUsage, UsageLedger};
use crate::error::Error;
use crate::money::{CostModel, Money};
use crate::par::{self, Exec};
use crate::predictor::features::{summarize_samples, SampleSummary};
use crate::predictor::{HintPredictor, Prediction};
use crate::prompt::render_prompt;
use crate::tokens::{DecodingParams, PieceTokenizer, Query, Tokenizer};

/// Result of running one query through a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub query_id: String,
    pub final_text: String,
    pub extracted_answer: String,
    /// `None` when the query has no ground truth.
    pub correct: Option<bool>,
    pub decision: Decision,
    pub rule: Rule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    pub usage: RoleUsage,
    pub dollars: Money,
    /// Time spent in the policy itself (features, prediction, mapping),
    /// excluding backend calls.
    pub decision_latency_us: u64,
}

impl Outcome {
    /// Dollar cost recomputed from usage.
    pub fn recompute_dollars(&self, cm: &CostModel) -> Money {
        self.usage.dollars(cm)
    }
}

/// Backend failure during execution, with what had happened so far.
#[derive(Debug, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct ExecutionError {
    #[source]
    pub source: Error,
    pub stage: &'static str,
    pub decision: Option<Decision>,
    pub rule: Option<Rule>,
    pub usage: RoleUsage,
}

/// Runs decisions against an SLM/LLM pair and meters every call.
pub struct Executor<'a> {
    pub slm: &'a dyn Backend,
    pub llm: &'a dyn Backend,
    pub judge: &'a dyn QualityJudge,
    pub cost: CostModel,
    pub cfg: PolicyConfig,
    /// How the `K` reactive samples are issued.
    pub exec: Exec,
}

struct Run<'q> {
    q: &'q Query,
    ledger: UsageLedger,
    decision: Option<Decision>,
    rule: Option<Rule>,
}

impl Run<'_> {
    fn fail(self, stage: &'static str, source: Error) -> ExecutionError {
        ExecutionError { source, stage, decision: self.decision, rule: self.rule, usage: *self.ledger.totals() }
    }
}

impl<'a> Executor<'a> {
    pub fn new(slm: &'a dyn Backend, llm: &'a dyn Backend, judge: &'a dyn QualityJudge, cost: CostModel, cfg: PolicyConfig) -> Self {
        Self { slm, llm, judge, cost, cfg, exec: Exec::Sequential }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    fn start<'q>(&self, q: &'q Query) -> Run<'q> {
        Run { q, ledger: UsageLedger::totals_only(self.cost), decision: None, rule: None }
    }

    fn bare_prompt(q: &Query) -> crate::tokens::TokenSequence {
        PieceTokenizer.tokenize(&render_prompt(q.text(), None))
    }

    /// SLM completion parameters (sampling settings, fixed seed 0).
    fn completion_params(&self) -> DecodingParams {
        DecodingParams::sampled(self.cfg.sample_temperature, self.cfg.sample_top_p, self.cfg.n_max, 0)
    }

    fn carry_out(&self, run: &mut Run<'_>, d: Decision) -> Result<GenerationResult, (&'static str, Error)> {
        let q = run.q;
        let bare = Self::bare_prompt(q);
        match d {
            Decision::SlmOnly => generate(self.slm, &bare, &self.completion_params(), self.cfg.n_max, &mut run.ledger)
                .map_err(|e| ("slm completion", e)),
            Decision::FullLlm => {
                generate(self.llm, &bare, &DecodingParams::deterministic(self.cfg.n_max), self.cfg.n_max, &mut run.ledger)
                    .map_err(|e| ("llm response", e))
            }
            Decision::Hint(n) => {
                let hint = generate(self.llm, &bare, &DecodingParams::deterministic(n), self.cfg.n_max, &mut run.ledger)
                    .map_err(|e| ("hint generation", e))?;
                let prompt = PieceTokenizer.tokenize(&render_prompt(q.text(), Some(&hint.text)));
                generate(self.slm, &prompt, &self.completion_params(), self.cfg.n_max, &mut run.ledger)
                    .map_err(|e| ("shepherded completion", e))
            }
        }
    }

    fn finish(
        &self,
        mut run: Run<'_>,
        text: String,
        prediction: Option<Prediction>,
        latency_us: u64,
    ) -> Outcome {
        let q = run.q;
        let extracted_answer = extract_answer(&text, q.task_kind);
        let correct = q.ground_truth.as_ref().map(|_| self.judge.satisfactory(q, &text));
        let usage = *run.ledger.totals();
        Outcome {
            query_id: q.id.clone(),
            final_text: text,
            extracted_answer,
            correct,
            decision: run.decision.take().unwrap_or(Decision::SlmOnly),
            rule: run.rule.take().unwrap_or(Rule::Static),
            prediction,
            dollars: run.ledger.dollars(),
            usage,
            decision_latency_us: latency_us,
        }
    }

    /// Executes a fixed decision (oracle and static policies).
    pub fn run_decision(&self, q: &Query, d: Decision, rule: Rule) -> Result<Outcome, ExecutionError> {
        let mut run = self.start(q);
        run.decision = Some(d);
        run.rule = Some(rule);
        match self.carry_out(&mut run, d) {
            Ok(r) => Ok(self.finish(run, r.text, None, 0)),
            Err((stage, e)) => Err(run.fail(stage, e)),
        }
    }

    /// Decides before any SLM call.
    pub fn run_proactive(&self, q: &Query, predictor: &dyn HintPredictor) -> Result<Outcome, ExecutionError> {
        let mut run = self.start(q);
        let t0 = Instant::now();
        let pred = match predictor.predict(q, None) {
            Ok(p) => p,
            Err(e) => return Err(run.fail("prediction", e)),
        };
        let (d, rule) = map_to_decision(&pred, &self.cfg);
        let latency = t0.elapsed().as_micros() as u64;
        run.decision = Some(d);
        run.rule = Some(rule);
        match self.carry_out(&mut run, d) {
            Ok(r) => Ok(self.finish(run, r.text, Some(pred), latency)),
            Err((stage, e)) => Err(run.fail(stage, e)),
        }
    }

    /// `K` sampled SLM answers, seeds `1..=K`, in seed order.
    pub fn sample_slm(&self, q: &Query, ledger: &mut UsageLedger) -> crate::error::Result<Vec<GenerationResult>> {
        let bare = Self::bare_prompt(q);
        let seeds: Vec<u64> = (1..=self.cfg.samples as u64).collect();
        let results = par::try_map(self.exec, &seeds, |&seed| {
            let p = DecodingParams::sampled(self.cfg.sample_temperature, self.cfg.sample_top_p, self.cfg.n_max, seed);
            let mut local = UsageLedger::totals_only(self.cost);
            generate(self.slm, &bare, &p, self.cfg.n_max, &mut local).map(|r| (r, *local.totals()))
        })?;
        Ok(results
            .into_iter()
            .map(|(r, u)| {
                ledger.record_all(&u);
                r
            })
            .collect())
    }

    /// Samples the SLM first and escalates only without a `k`-of-`K` quorum.
    pub fn run_reactive(&self, q: &Query, predictor: &dyn HintPredictor) -> Result<Outcome, ExecutionError> {
        let mut run = self.start(q);
        let results = match self.sample_slm(q, &mut run.ledger) {
            Ok(r) => r,
            Err(e) => return Err(run.fail("slm sampling", e)),
        };
        let t0 = Instant::now();
        let summaries: Vec<SampleSummary> = summarize_samples(&results, q.task_kind);
        let answers: Vec<&str> = summaries.iter().map(|s| s.answer.as_str()).collect();
        if let Some(agreed) = consensus(&answers, self.cfg.quorum) {
            let i = answers.iter().position(|a| *a == agreed).expect("agreed answer is present");
            let latency = t0.elapsed().as_micros() as u64;
            run.decision = Some(Decision::SlmOnly);
            run.rule = Some(Rule::Consensus);
            let text = results[i].text.clone();
            return Ok(self.finish(run, text, None, latency));
        }
        let pred = match predictor.predict(q, Some(&summaries)) {
            Ok(p) => p,
            Err(e) => return Err(run.fail("prediction", e)),
        };
        let (d, rule) = map_to_decision(&pred, &self.cfg);
        let latency = t0.elapsed().as_micros() as u64;
        run.decision = Some(d);
        run.rule = Some(rule);
        match self.carry_out(&mut run, d) {
            Ok(r) => Ok(self.finish(run, r.text, Some(pred), latency)),
            Err((stage, e)) => Err(run.fail(stage, e)),
        }
    }
}
