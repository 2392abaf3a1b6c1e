//! Synthetic workloads with a known minimum hint size per query, scripted
//! SLM/LLM doubles that honor it, and an end-to-end experiment harness.

mod experiment;

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendSpec, MockBackend, MockScript, Role, ScriptEntry, ScriptedResponse};
use crate::error::{Error, Result};
use crate::labeling::{grid_sizes, LengthDist, TraceProfile};
use crate::par::{self, Exec};
use crate::tokens::{Query, TaskKind};

pub use experiment::{
    rescore_items, run_experiment, split_dataset, CalibrationTarget, ExperimentConfig, ExperimentReport, ModeCalibration,
    Strategy,
};

const PRESETS: &str = include_str!("profiles.json");

/// Named profiles shipped with the crate.
pub fn presets() -> BTreeMap<String, TraceProfile> {
    serde_json::from_str(PRESETS).expect("bundled profiles parse")
}

pub fn preset(name: &str) -> Result<TraceProfile> {
    presets()
        .remove(&name.to_ascii_lowercase())
        .ok_or_else(|| Error::InvalidProfile(format!("no preset named `{name}`")))
}

/// Reads a profile file holding either one profile or a map of named ones.
/// `name` picks from a map.
pub fn load_profile(path: &Path, name: Option<&str>) -> Result<TraceProfile> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let p: TraceProfile = if v.get("p_zero").is_some() {
        serde_json::from_value(v)?
    } else {
        let mut all: BTreeMap<String, TraceProfile> = serde_json::from_value(v)?;
        let key = name.ok_or_else(|| Error::InvalidProfile("profile file holds several profiles; pick one".into()))?;
        all.remove(key).ok_or_else(|| Error::InvalidProfile(format!("no profile `{key}` in {}", path.display())))?
    };
    p.validate()?;
    Ok(p)
}

/// Knobs of the generator beyond the profile masses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub step_pct: u32,
    /// Draw `n*` anywhere inside its bucket instead of on the grid point.
    pub off_grid: bool,
    /// Share of hint-needing queries that get a failure window.
    pub failure_window_rate: f64,
    /// Reactive samples scripted per query.
    pub samples: usize,
    /// Probability that a query word comes from its difficulty class
    /// vocabulary rather than the shared one. 1 makes classes separable.
    pub text_signal: f64,
    /// Exponent tying the LLM answer length to the query length.
    pub length_coupling: f64,
    /// Share of unsolvable queries whose LLM answer is also wrong.
    pub llm_wrong_when_unsolvable: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            step_pct: 10,
            off_grid: false,
            failure_window_rate: 0.05,
            samples: 3,
            text_signal: 0.25,
            length_coupling: 0.5,
            llm_wrong_when_unsolvable: 0.25,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        grid_sizes(100, self.step_pct)?;
        for (v, what) in [
            (self.failure_window_rate, "failure_window_rate"),
            (self.text_signal, "text_signal"),
            (self.llm_wrong_when_unsolvable, "llm_wrong_when_unsolvable"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParams(format!("{what} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Difficulty class of a synthetic query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "pct", rename_all = "snake_case")]
pub enum Difficulty {
    NoHint,
    /// Needs a hint of about this percentage of the LLM answer.
    Hint(u32),
    Unsolvable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub query: Query,
    pub difficulty: Difficulty,
    /// `|h_l(q)|`.
    pub llm_len: usize,
    /// Scripted minimum hint size; `llm_len` when unsolvable.
    pub n_star: usize,
    /// Inclusive range of hint sizes that fail despite `n ≥ n*`.
    pub failure_window: Option<(usize, usize)>,
    pub llm_correct: bool,
    pub answer: u64,
    pub wrong: [u64; 2],
    /// Answers of the reactive samples, seeds `1..=K`.
    pub sample_answers: Vec<u64>,
    pub sample_entropy: Vec<f64>,
    pub slm_len: usize,
    /// Seed for the filler text of the scripted responses.
    pub text_seed: u64,
}

impl SyntheticQuery {
    pub fn unsolvable(&self) -> bool {
        self.difficulty == Difficulty::Unsolvable
    }
}

/// Whether the SLM answers correctly with an `n`-token hint.
///
/// Unsolvable queries only pass with the whole LLM answer as the hint, and
/// only when that answer is right.
pub fn synth_quality(sq: &SyntheticQuery, n: usize) -> bool {
    if sq.unsolvable() {
        return sq.llm_correct && n >= sq.llm_len;
    }
    n >= sq.n_star && sq.failure_window.is_none_or(|(a, b)| n < a || n > b)
}

const SYL: [&str; 10] = ["ka", "lo", "mi", "ne", "su", "ta", "ri", "po", "ve", "zu"];
const CLASS_TAGS: [&str; 11] = ["ba", "de", "fi", "go", "hu", "ji", "ko", "lu", "ma", "no", "pe"];
const FILLER: [&str; 24] = [
    "first", "we", "note", "that", "the", "value", "is", "then", "so", "compute", "each", "part", "and", "add",
    "it", "to", "result", "which", "gives", "now", "check", "step", "total", "carry",
];

fn word(tag: &str, j: usize) -> String {
    format!("{tag}{}{}", SYL[j % 10], SYL[(j / 10) % 10])
}

fn class_index(d: Difficulty) -> usize {
    match d {
        Difficulty::NoHint => 0,
        Difficulty::Hint(p) => (p.div_ceil(10) as usize).clamp(1, 9),
        Difficulty::Unsolvable => 10,
    }
}

/// Letters-only id so that no digits leak into the question.
fn letter_code(mut i: usize) -> String {
    let mut s = String::from("q");
    loop {
        s.push((b'a' + (i % 26) as u8) as char);
        i /= 26;
        if i == 0 {
            return s;
        }
    }
}

fn draw_len(d: &LengthDist, scale: f64, rng: &mut ChaCha8Rng) -> usize {
    let median = d.median * scale;
    let v = if d.sigma == 0.0 {
        median
    } else {
        LogNormal::new(median.ln(), d.sigma).expect("validated sigma").sample(rng)
    };
    (v.round() as usize).clamp(d.min, d.max)
}

fn entropy_trace(mean: f64, rng: &mut ChaCha8Rng) -> f64 {
    (mean + rng.random_range(-0.15..0.15)).max(0.01)
}

fn one_query(profile: &TraceProfile, cfg: &GeneratorConfig, seed: u64, i: usize, classes: &WeightedIndex<f64>) -> Result<SyntheticQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let class = classes.sample(&mut rng);
    let difficulty = match class {
        0 => Difficulty::NoHint,
        10 => Difficulty::Unsolvable,
        b => Difficulty::Hint(10 * b as u32),
    };

    let q_len = draw_len(&profile.query_len, 1.0, &mut rng);
    let scale = (q_len as f64 / profile.query_len.median).powf(cfg.length_coupling);
    let llm_len = draw_len(&profile.llm_len, scale, &mut rng);

    let grid = grid_sizes(llm_len, cfg.step_pct)?;
    let (n_star, failure_window) = match difficulty {
        Difficulty::NoHint => (0, None),
        Difficulty::Unsolvable => (llm_len, None),
        Difficulty::Hint(p) => {
            let hi = p as usize * llm_len / 100;
            // coarse grids have no point at every 10%; use the next one up
            let gi = grid.iter().position(|&g| g >= hi).unwrap_or(grid.len() - 1);
            let snapped = grid[gi];
            let n = if cfg.off_grid {
                let lo = if gi == 0 { 0 } else { grid[gi - 1] };
                rng.random_range(lo + 1..=snapped)
            } else {
                snapped
            };
            let window = (rng.random::<f64>() < cfg.failure_window_rate).then(|| {
                let start = rng.random_range(gi..grid.len());
                let width = rng.random_range(1..=2usize);
                let end = grid.get(start + width).copied().unwrap_or(llm_len) - 1;
                (grid[start], end)
            });
            (n, window)
        }
    };

    let ci = class_index(difficulty);
    let n_words = q_len.saturating_sub(2).max(1);
    let mut text = letter_code(i);
    for _ in 0..n_words {
        let j = rng.random_range(0..30);
        let w = if rng.random::<f64>() < cfg.text_signal { word(CLASS_TAGS[ci], j) } else { word("ra", j * 3 + 1) };
        text.push(' ');
        text.push_str(&w);
    }
    text.push('?');

    let answer = rng.random_range(10..100_000u64);
    let wrong = [answer + rng.random_range(1..50u64), answer + rng.random_range(50..500u64)];
    let llm_correct = !(difficulty == Difficulty::Unsolvable && rng.random::<f64>() < cfg.llm_wrong_when_unsolvable);

    let (p_right, mean_entropy) = match difficulty {
        Difficulty::NoHint => (0.9, 0.3),
        Difficulty::Hint(p) => (0.3 - 0.02 * (p / 10) as f64, 0.8 + 0.08 * (p / 10) as f64),
        Difficulty::Unsolvable => (0.05, 1.6),
    };
    let mut sample_answers = Vec::with_capacity(cfg.samples);
    let mut sample_entropy = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        // wrong samples mostly scatter; a minority repeat one of two systematic mistakes
        let u = rng.random::<f64>();
        let a = if u < p_right {
            answer
        } else if u < p_right + (1.0 - p_right) * 0.15 {
            wrong[0]
        } else if u < p_right + (1.0 - p_right) * 0.3 {
            wrong[1]
        } else {
            answer + rng.random_range(500..1_000_000u64)
        };
        sample_answers.push(a);
        sample_entropy.push(entropy_trace(mean_entropy, &mut rng));
    }
    let slm_len = draw_len(&profile.llm_len, 0.6, &mut rng);
    let gt = answer.to_string();
    Ok(SyntheticQuery {
        query: Query::new(format!("{}-{i}", profile.name), &text, TaskKind::MathNumeric, Some(gt))?,
        difficulty,
        llm_len,
        n_star,
        failure_window,
        llm_correct,
        answer,
        wrong,
        sample_answers,
        sample_entropy,
        slm_len,
        text_seed: rng.random(),
    })
}

/// `n` queries drawn from `profile`. Query `i` uses its own random stream,
/// so the trace is identical in every execution mode.
pub fn generate_trace(profile: &TraceProfile, n: usize, seed: u64, cfg: &GeneratorConfig, exec: Exec) -> Result<Vec<SyntheticQuery>> {
    profile.validate()?;
    cfg.validate()?;
    let mut weights = vec![profile.p_zero];
    weights.extend(profile.bucket_masses);
    weights.push(profile.p_unsolvable);
    let classes = WeightedIndex::new(&weights).map_err(|e| Error::InvalidProfile(e.to_string()))?;
    par::map_range(exec, n, |i| one_query(profile, cfg, seed, i, &classes)).into_iter().collect()
}

/// `n*` shares of a trace: `(p_zero, buckets, p_unsolvable)`.
pub fn trace_shares(trace: &[SyntheticQuery]) -> (f64, [f64; 9], f64) {
    let n = trace.len().max(1) as f64;
    let mut zero = 0usize;
    let mut unsolvable = 0usize;
    let mut buckets = [0usize; 9];
    for sq in trace {
        match sq.difficulty {
            Difficulty::NoHint => zero += 1,
            Difficulty::Unsolvable => unsolvable += 1,
            d => buckets[class_index(d) - 1] += 1,
        }
    }
    (zero as f64 / n, buckets.map(|c| c as f64 / n), unsolvable as f64 / n)
}

fn response(len: usize, answer: u64, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<&str> = (0..len.saturating_sub(1)).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect();
    let a = answer.to_string();
    words.push(&a);
    words.join(" ")
}

/// Scripts for one query: `(slm, llm)`.
pub fn script_entries(sq: &SyntheticQuery) -> (ScriptEntry, ScriptEntry) {
    let mut rng = ChaCha8Rng::seed_from_u64(sq.text_seed);
    let llm_answer = if sq.llm_correct { sq.answer } else { sq.wrong[0] };
    let llm = ScriptEntry::new(response(sq.llm_len, llm_answer, &mut rng));

    let right = response(sq.slm_len, sq.answer, &mut rng);
    let wrong = response(sq.slm_len, sq.wrong[0], &mut rng);
    let base_entropy = sq.sample_entropy.iter().sum::<f64>() / sq.sample_entropy.len().max(1) as f64;
    let canonical = if sq.n_star == 0 { right.clone() } else { wrong.clone() };
    let mut slm = ScriptEntry::new(canonical);
    slm.canonical.entropy = Some(vec![base_entropy]);
    if let Some((a, b)) = sq.failure_window {
        slm = slm.hint_rule(a, Some(b), wrong.clone());
    }
    let shepherded = response(sq.llm_len.saturating_sub(sq.n_star).max(5), sq.answer, &mut rng);
    if sq.unsolvable() {
        if sq.llm_correct {
            slm = slm.hint_rule(sq.llm_len, None, shepherded);
        }
    } else {
        slm = slm.hint_rule(sq.n_star.max(1), None, shepherded);
    }
    for (k, (&a, &e)) in sq.sample_answers.iter().zip(&sq.sample_entropy).enumerate() {
        let text = response(sq.slm_len, a, &mut rng);
        slm = slm.sample(k as u64 + 1, ScriptedResponse::text(text).with_entropy(vec![e]));
    }
    (slm, llm)
}

/// Scripted `(slm, llm)` backends answering every query of the trace.
pub fn build_mocks(trace: &[SyntheticQuery], exec: Exec) -> (MockBackend, MockBackend) {
    let entries = par::map(exec, trace, |sq| (sq.query.text().to_string(), script_entries(sq)));
    let mut slm = MockScript::default();
    let mut llm = MockScript::default();
    for (q, (s, l)) in entries {
        slm.insert(q.clone(), s);
        llm.insert(q, l);
    }
    (
        MockBackend::new(BackendSpec::mock("synthetic-slm", Role::Slm), slm),
        MockBackend::new(BackendSpec::mock("synthetic-llm", Role::Llm), llm),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(n_star: usize, window: Option<(usize, usize)>) -> SyntheticQuery {
        SyntheticQuery {
            query: Query::new("x", "qa kalo?", TaskKind::MathNumeric, Some("5".into())).unwrap(),
            difficulty: if n_star == 0 { Difficulty::NoHint } else { Difficulty::Hint(20) },
            llm_len: 200,
            n_star,
            failure_window: window,
            llm_correct: true,
            answer: 5,
            wrong: [6, 7],
            sample_answers: vec![5, 5, 6],
            sample_entropy: vec![0.3, 0.3, 0.3],
            slm_len: 50,
            text_seed: 1,
        }
    }

    #[test]
    fn quality_examples() {
        let s = sq(40, None);
        assert!(!synth_quality(&s, 39));
        assert!(synth_quality(&s, 40));
        let w = sq(40, Some((70, 80)));
        assert!(!synth_quality(&w, 75));
        assert!(synth_quality(&w, 81));
        assert!(synth_quality(&sq(0, None), 0));
    }

    #[test]
    fn presets_are_valid() {
        for (name, p) in presets() {
            p.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert_eq!(preset("GSM8K").unwrap().p_zero, 0.806);
        assert!(preset("mmlu").is_err());
    }

    #[test]
    fn degenerate_profile_has_no_hints() {
        let p = TraceProfile { p_zero: 1.0, bucket_masses: [0.0; 9], p_unsolvable: 0.0, ..preset("gsm8k").unwrap() };
        let t = generate_trace(&p, 300, 3, &GeneratorConfig::default(), Exec::Parallel).unwrap();
        assert!(t.iter().all(|s| s.n_star == 0));
    }

    #[test]
    fn invalid_profile_is_rejected() {
        let p = TraceProfile { p_zero: 0.9, ..preset("gsm8k").unwrap() };
        assert!(matches!(generate_trace(&p, 10, 0, &GeneratorConfig::default(), Exec::Sequential), Err(Error::InvalidProfile(_))));
    }

    #[test]
    fn same_seed_same_trace_in_both_modes() {
        let p = preset("cnk12").unwrap();
        let cfg = GeneratorConfig::default();
        let a = generate_trace(&p, 200, 11, &cfg, Exec::Sequential).unwrap();
        let b = generate_trace(&p, 200, 11, &cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_trace(&p, 200, 12, &cfg, Exec::Sequential).unwrap());
    }

    #[test]
    fn snapped_labels_sit_on_the_grid() {
        let p = preset("cnk12").unwrap();
        let t = generate_trace(&p, 500, 5, &GeneratorConfig::default(), Exec::Parallel).unwrap();
        for s in t.iter().filter(|s| matches!(s.difficulty, Difficulty::Hint(_))) {
            assert!(grid_sizes(s.llm_len, 10).unwrap().contains(&s.n_star));
        }
    }

    #[test]
    fn scripts_follow_quality() {
        use crate::backends::Backend;
        use crate::prompt::render_prompt;
        use crate::tokens::{DecodingParams, PieceTokenizer, Tokenizer};
        let p = preset("cnk12").unwrap();
        let cfg = GeneratorConfig { failure_window_rate: 0.5, ..Default::default() };
        let t = generate_trace(&p, 60, 9, &cfg, Exec::Sequential).unwrap();
        let (slm, llm) = build_mocks(&t, Exec::Sequential);
        let greedy = DecodingParams::deterministic(4096);
        for s in &t {
            let full = llm.full_response(s.query.text()).unwrap();
            assert_eq!(full.len(), s.llm_len);
            for n in [0, s.n_star.saturating_sub(1), s.n_star, s.llm_len / 2, s.llm_len] {
                let hint = (n > 0).then(|| full.prefix(n).unwrap().text().to_string());
                let prompt = PieceTokenizer.tokenize(&render_prompt(s.query.text(), hint.as_deref()));
                let out = slm.complete(&prompt, &greedy).unwrap().text;
                let ok = out.ends_with(&format!(" {}", s.answer));
                assert_eq!(ok, synth_quality(s, n), "query {} n={n}", s.query.id);
            }
        }
    }
}
