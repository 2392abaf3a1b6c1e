use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendSpec, FinishReason, GenerationResult, Usage};
use crate::prompt::parse_prompt;
use crate::tokens::{DecodingParams, PieceTokenizer, TokenSequence, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub text: String,
    /// Per-token entropy, cycled over the output; surfaced as negative logprobs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<Vec<f64>>,
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), entropy: None }
    }

    pub fn with_entropy(mut self, trace: Vec<f64>) -> Self {
        self.entropy = Some(trace);
        self
    }
}

/// Response used when the hint length (in tokens) falls in `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintRule {
    pub min: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<usize>,
    pub response: ScriptedResponse,
}

impl HintRule {
    fn matches(&self, hint_len: usize) -> bool {
        hint_len >= self.min && self.max.is_none_or(|m| hint_len <= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// The greedy, unhinted answer.
    pub canonical: ScriptedResponse,
    /// Checked in order for hinted prompts; first match wins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hinted: Vec<HintRule>,
    /// Alternates for sampled (temperature > 0) unhinted calls, by seed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub samples: BTreeMap<u64, ScriptedResponse>,
}

impl ScriptEntry {
    pub fn new(canonical: impl Into<String>) -> Self {
        Self { canonical: ScriptedResponse::text(canonical), hinted: Vec::new(), samples: BTreeMap::new() }
    }

    pub fn hint_rule(mut self, min: usize, max: Option<usize>, text: impl Into<String>) -> Self {
        self.hinted.push(HintRule { min, max, response: ScriptedResponse::text(text) });
        self
    }

    pub fn sample(mut self, seed: u64, response: ScriptedResponse) -> Self {
        self.samples.insert(seed, response);
        self
    }

    fn select(&self, hint_len: usize, params: &DecodingParams) -> &ScriptedResponse {
        if hint_len > 0 {
            if let Some(rule) = self.hinted.iter().find(|r| r.matches(hint_len)) {
                return &rule.response;
            }
        } else if !params.is_deterministic() {
            if let Some(alt) = params.seed.and_then(|s| self.samples.get(&s)) {
                return alt;
            }
        }
        &self.canonical
    }
}

/// Scripted behavior keyed by question text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: HashMap<String, ScriptEntry>,
}

impl MockScript {
    pub fn insert(&mut self, question: impl Into<String>, entry: ScriptEntry) {
        self.entries.insert(question.into(), entry);
    }

    pub fn get(&self, question: &str) -> Option<&ScriptEntry> {
        self.entries.get(question)
    }
}

/// Deterministic test double.
///
/// The prompt is parsed back into question and hint; the hint length in
/// tokens selects the scripted response. A budget of `n` returns exactly the
/// first `n` tokens of the selected response.
#[derive(Debug)]
pub struct MockBackend {
    spec: BackendSpec,
    script: MockScript,
    calls: AtomicUsize,
    fail_next: AtomicUsize,
}

impl MockBackend {
    pub fn new(spec: BackendSpec, script: MockScript) -> Self {
        Self { spec, script, calls: AtomicUsize::new(0), fail_next: AtomicUsize::new(0) }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    /// Number of completed `complete` calls, failures included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Makes the next `n` calls fail with [`BackendError::Injected`].
    pub fn fail_next(&self, n: usize) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    /// The full (unbounded) response this mock would give.
    pub fn full_response(&self, question: &str) -> Option<TokenSequence> {
        self.script.get(question).map(|e| PieceTokenizer.tokenize(&e.canonical.text))
    }
}

impl Backend for MockBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn complete(
        &self,
        prompt: &TokenSequence,
        params: &DecodingParams,
    ) -> Result<GenerationResult, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(BackendError::Injected);
        }
        if params.max_new_tokens == 0 {
            return Ok(GenerationResult::empty_budget());
        }
        let (question, hint) = parse_prompt(prompt.text());
        let entry = self
            .script
            .get(question)
            .ok_or_else(|| BackendError::UnscriptedQuery(question.to_string()))?;
        let hint_len = hint.map_or(0, |h| PieceTokenizer.count(h));
        let response = entry.select(hint_len, params);

        let full = PieceTokenizer.tokenize(&response.text);
        let (tokens, finish_reason) = if full.len() > params.max_new_tokens {
            (full.prefix(params.max_new_tokens).expect("budget below length"), FinishReason::BudgetExhausted)
        } else {
            (full, FinishReason::NaturalStop)
        };
        let token_logprobs = response.entropy.as_ref().filter(|t| !t.is_empty()).map(|trace| {
            (0..tokens.len()).map(|i| -trace[i % trace.len()]).collect::<Vec<_>>()
        });
        Ok(GenerationResult {
            text: tokens.text().to_string(),
            usage: Usage::new(prompt.len() as u64, tokens.len() as u64),
            tokens,
            token_logprobs,
            finish_reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{generate, Role, UsageLedger};
    use crate::money::CostModel;
    use crate::prompt::render_prompt;

    fn llm() -> MockBackend {
        let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let mut s = MockScript::default();
        s.insert("Q1", ScriptEntry::new(words.join(" ")));
        MockBackend::new(BackendSpec::mock("big", Role::Llm), s)
    }

    fn prompt(q: &str) -> TokenSequence {
        PieceTokenizer.tokenize(&render_prompt(q, None))
    }

    #[test]
    fn budget_truncates_to_prefix() {
        let m = llm();
        let full = m.full_response("Q1").unwrap();
        assert_eq!(full.len(), 200);
        let r = m.complete(&prompt("Q1"), &DecodingParams::deterministic(40)).unwrap();
        assert_eq!(r.tokens, full.prefix(40).unwrap());
        assert_eq!(r.finish_reason, FinishReason::BudgetExhausted);
        assert_eq!(r.usage.output_tokens, 40);
        let all = m.complete(&prompt("Q1"), &DecodingParams::deterministic(500)).unwrap();
        assert_eq!(all.finish_reason, FinishReason::NaturalStop);
        assert_eq!(all.tokens, full);
    }

    #[test]
    fn zero_budget_is_empty() {
        let m = llm();
        let mut ledger = UsageLedger::new(CostModel::hosted_70b_free_slm());
        let r = generate(&m, &prompt("Q1"), &DecodingParams::deterministic(0), 4096, &mut ledger).unwrap();
        assert!(r.tokens.is_empty());
        assert_eq!(r.usage.output_tokens, 0);
        assert_eq!(r.finish_reason, FinishReason::BudgetExhausted);
        assert_eq!(m.calls(), 0);
        let direct = m.complete(&prompt("Q1"), &DecodingParams::deterministic(0)).unwrap();
        assert!(direct.tokens.is_empty());
    }

    #[test]
    fn greedy_is_repeatable() {
        let m = llm();
        let p = DecodingParams::deterministic(100);
        let a = m.complete(&prompt("Q1"), &p).unwrap();
        let b = m.complete(&prompt("Q1"), &p).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn hint_rules_and_samples() {
        let entry = ScriptEntry::new("wrong 1")
            .hint_rule(5, Some(6), "dip 2")
            .hint_rule(3, None, "right 3")
            .sample(1, ScriptedResponse::text("alt 9").with_entropy(vec![0.5]));
        let mut s = MockScript::default();
        s.insert("Q", entry);
        let m = MockBackend::new(BackendSpec::mock("small", Role::Slm), s);
        let greedy = DecodingParams::deterministic(50);
        let hinted = |h: &str| PieceTokenizer.tokenize(&render_prompt("Q", Some(h)));
        assert_eq!(m.complete(&prompt("Q"), &greedy).unwrap().text, "wrong 1");
        assert_eq!(m.complete(&hinted("a b"), &greedy).unwrap().text, "wrong 1");
        assert_eq!(m.complete(&hinted("a b c"), &greedy).unwrap().text, "right 3");
        assert_eq!(m.complete(&hinted("a b c d e"), &greedy).unwrap().text, "dip 2");
        assert_eq!(m.complete(&hinted("a b c d e f g"), &greedy).unwrap().text, "right 3");
        let sampled = m.complete(&prompt("Q"), &DecodingParams::sampled(0.3, 0.95, 50, 1)).unwrap();
        assert_eq!(sampled.text, "alt 9");
        assert_eq!(sampled.token_logprobs, Some(vec![-0.5, -0.5]));
        let other = m.complete(&prompt("Q"), &DecodingParams::sampled(0.3, 0.95, 50, 2)).unwrap();
        assert_eq!(other.text, "wrong 1");
    }

    #[test]
    fn unscripted_and_injected_failures() {
        let m = llm();
        assert!(matches!(
            m.complete(&prompt("nope"), &DecodingParams::deterministic(5)),
            Err(BackendError::UnscriptedQuery(_))
        ));
        m.fail_next(1);
        assert!(m.complete(&prompt("Q1"), &DecodingParams::deterministic(5)).is_err());
        assert!(m.complete(&prompt("Q1"), &DecodingParams::deterministic(5)).is_ok());
    }

    #[test]
    fn prefix_property_for_every_budget() {
        let m = llm();
        let full = m.full_response("Q1").unwrap();
        for n in 0..=full.len() {
            let r = m.complete(&prompt("Q1"), &DecodingParams::deterministic(n)).unwrap();
            assert_eq!(r.tokens, full.prefix(n).unwrap());
        }
    }
}
