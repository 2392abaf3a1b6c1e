//! Final-answer extraction and quality judging.

use std::sync::OnceLock;

use regex::Regex;

use crate::tokens::{Query, TaskKind};

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d[\d,]*(?:\.\d+)?").unwrap())
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[^\n]*\n(.*?)```").unwrap())
}

/// Strips thousands separators and redundant fractional zeros.
pub fn normalize_number(raw: &str) -> String {
    let mut s: String = raw.chars().filter(|&c| c != ',').collect();
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Canonical answer of a response. Never fails: an unparseable response
/// yields the empty string.
pub fn extract_answer(text: &str, kind: TaskKind) -> String {
    match kind {
        TaskKind::MathNumeric => number_re()
            .find_iter(text)
            .last()
            .map(|m| normalize_number(m.as_str()))
            .unwrap_or_default(),
        TaskKind::Code => fence_re()
            .captures(text)
            .map(|c| c[1].trim().to_string())
            .unwrap_or_else(|| text.trim().to_string()),
        TaskKind::Freeform => text.trim().to_string(),
    }
}

/// Scores a response against a query. Scores lie in `[0, 1]`; a response is
/// satisfactory when its score reaches [`threshold`](QualityJudge::threshold).
pub trait QualityJudge: Send + Sync {
    fn judge(&self, query: &Query, response: &str) -> f64;

    fn threshold(&self) -> f64 {
        1.0
    }

    fn satisfactory(&self, query: &Query, response: &str) -> bool {
        self.judge(query, response) >= self.threshold()
    }
}

/// Binary judge: 1 when the extracted answer equals the extracted ground truth.
#[derive(Debug, Clone, Copy)]
pub struct ExactMatchJudge {
    threshold: f64,
}

impl Default for ExactMatchJudge {
    fn default() -> Self {
        Self { threshold: 1.0 }
    }
}

impl ExactMatchJudge {
    /// Any threshold in `(0, 1]` behaves identically for a binary judge.
    pub fn with_threshold(threshold: f64) -> Option<Self> {
        (threshold > 0.0 && threshold <= 1.0).then_some(Self { threshold })
    }
}

impl QualityJudge for ExactMatchJudge {
    fn judge(&self, query: &Query, response: &str) -> f64 {
        let Some(truth) = query.ground_truth.as_deref() else {
            return 0.0;
        };
        let expected = extract_answer(truth, query.task_kind);
        let got = extract_answer(response, query.task_kind);
        if !expected.is_empty() && got == expected {
            1.0
        } else {
            0.0
        }
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }
}
