//! Numeric features fed to the fusion MLP.
//!
//! Proactive mode only knows the query length. Reactive mode also sees `K`
//! sampled SLM answers and adds their mean entropy and mean output length.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::answer::extract_answer;
use crate::backends::GenerationResult;
use crate::error::{Error, Result};
use crate::tokens::{Query, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Proactive,
    Reactive,
}

impl FeatureMode {
    pub fn width(self) -> usize {
        match self {
            FeatureMode::Proactive => 1,
            FeatureMode::Reactive => 3,
        }
    }
}

/// What the policy keeps from one sampled SLM answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub answer: String,
    pub output_len: usize,
    pub entropy: f64,
}

/// Most frequent non-empty answer, earliest first on ties.
pub fn modal_answer<S: AsRef<str>>(answers: &[S]) -> Option<&str> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in answers {
        let a = a.as_ref();
        if !a.is_empty() {
            *counts.entry(a).or_default() += 1;
        }
    }
    let best = counts.values().copied().max()?;
    answers.iter().map(|a| a.as_ref()).find(|a| counts.get(a) == Some(&best))
}

/// Per-sample entropy is `-mean(logprob)` when the backend returned token
/// logprobs. Otherwise it is 1 when the sample's answer differs from the modal
/// answer and 0 when it agrees, so the mean becomes the disagreement rate.
pub fn summarize_samples(results: &[GenerationResult], kind: TaskKind) -> Vec<SampleSummary> {
    let answers: Vec<String> = results.iter().map(|r| extract_answer(&r.text, kind)).collect();
    let modal = modal_answer(&answers).map(str::to_owned);
    results
        .iter()
        .zip(answers)
        .map(|(r, answer)| {
            let entropy = match r.token_logprobs.as_deref() {
                Some(lp) if !lp.is_empty() => -lp.iter().sum::<f64>() / lp.len() as f64,
                _ => f64::from(modal.as_deref() != Some(answer.as_str())),
            };
            SampleSummary { answer, output_len: r.tokens.len(), entropy }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub query_token_len: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_output_len: Option<f64>,
}

impl FeatureVector {
    pub fn mode(&self) -> FeatureMode {
        if self.avg_entropy.is_some() {
            FeatureMode::Reactive
        } else {
            FeatureMode::Proactive
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.query_token_len];
        if let (Some(e), Some(l)) = (self.avg_entropy, self.avg_output_len) {
            v.push(e);
            v.push(l);
        }
        v
    }
}

pub fn features_from_summaries(query_len: usize, samples: Option<&[SampleSummary]>) -> Result<FeatureVector> {
    let mut f = FeatureVector { query_token_len: query_len as f64, avg_entropy: None, avg_output_len: None };
    if let Some(s) = samples {
        if s.is_empty() {
            return Err(Error::NoSamples);
        }
        let k = s.len() as f64;
        f.avg_entropy = Some(s.iter().map(|x| x.entropy).sum::<f64>() / k);
        f.avg_output_len = Some(s.iter().map(|x| x.output_len as f64).sum::<f64>() / k);
    }
    Ok(f)
}

/// Features for `q`. Passing samples switches to reactive mode.
pub fn extract_features(q: &Query, samples: Option<&[GenerationResult]>) -> Result<FeatureVector> {
    match samples {
        None => features_from_summaries(q.prompt.len(), None),
        Some(r) => features_from_summaries(q.prompt.len(), Some(&summarize_samples(r, q.task_kind))),
    }
}

/// Per-column z-scoring fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?;
        let w = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; w];
        for r in rows {
            if r.len() != w {
                return Err(Error::Shape(format!("feature row of width {} vs {w}", r.len())));
            }
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; w];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        // constant columns pass through centered
        let std = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.width() {
            return Err(Error::Shape(format!("expected {} features, got {}", self.width(), raw.len())));
        }
        Ok(raw.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FinishReason, Usage};
    use crate::tokens::{PieceTokenizer, Tokenizer};

    fn result(text: &str, logprobs: Option<Vec<f64>>) -> GenerationResult {
        let tokens = PieceTokenizer.tokenize(text);
        GenerationResult {
            text: text.into(),
            usage: Usage::new(1, tokens.len() as u64),
            tokens,
            token_logprobs: logprobs,
            finish_reason: FinishReason::NaturalStop,
        }
    }

    #[test]
    fn averages_follow_formulas() {
        let s: Vec<SampleSummary> = [(120, 0.2), (140, 0.4), (100, 0.6)]
            .iter()
            .map(|&(l, e)| SampleSummary { answer: "1".into(), output_len: l, entropy: e })
            .collect();
        let f = features_from_summaries(30, Some(&s)).unwrap();
        assert_eq!(f.avg_output_len, Some(120.0));
        assert!((f.avg_entropy.unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(f.to_vec().len(), 3);
        assert_eq!(f.mode(), FeatureMode::Reactive);
    }

    #[test]
    fn proactive_is_length_only() {
        let q = Query::new("q", "how many apples", TaskKind::MathNumeric, None).unwrap();
        let f = extract_features(&q, None).unwrap();
        assert_eq!(f.to_vec(), vec![3.0]);
        assert!(matches!(extract_features(&q, Some(&[])), Err(Error::NoSamples)));
    }

    #[test]
    fn entropy_from_logprobs_or_disagreement() {
        let with_lp = summarize_samples(&[result("x 5", Some(vec![-0.2, -0.4]))], TaskKind::MathNumeric);
        assert!((with_lp[0].entropy - 0.3).abs() < 1e-12);
        let r = [result("is 8", None), result("is 8", None), result("is 9", None)];
        let s = summarize_samples(&r, TaskKind::MathNumeric);
        assert_eq!(s.iter().map(|x| x.entropy).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        assert_eq!(s[2].answer, "9");
    }

    #[test]
    fn modal_ties_go_to_first() {
        assert_eq!(modal_answer(&["b", "a", "a", "b"]), Some("b"));
        assert_eq!(modal_answer(&["", ""]), None);
    }

    #[test]
    fn standardizer_zero_mean_unit_var() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, 5.0]).collect();
        let st = Standardizer::fit(&rows).unwrap();
        let z: Vec<Vec<f64>> = rows.iter().map(|r| st.apply(r).unwrap()).collect();
        let mean: f64 = z.iter().map(|r| r[0]).sum::<f64>() / 100.0;
        let var: f64 = z.iter().map(|r| r[0] * r[0]).sum::<f64>() / 100.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        assert_eq!(z[3][1], 0.0);
        assert!(st.apply(&[1.0]).is_err());
    }
}
