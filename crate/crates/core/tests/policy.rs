use proptest::prelude::*;
use shepherd_core::answer::ExactMatchJudge;
use shepherd_core::backends::{BackendSpec, MockBackend, MockScript, Role, ScriptEntry, ScriptedResponse};
use shepherd_core::policy::{
    consensus, map_to_decision, read_outcomes, write_outcomes, Decision, Executor, PolicyConfig, Rule,
};
use shepherd_core::predictor::features::FeatureMode;
use shepherd_core::predictor::{FixedPredictor, Prediction};
use shepherd_core::{CostModel, Query, TaskKind};

const Q: &str = "A farmer has 3 pens with 14 sheep each. How many sheep?";

fn llm_text() -> String {
    let words: Vec<String> = (0..120).map(|i| format!("step{i}")).collect();
    format!("{} so 42", words.join(" "))
}

fn setup(slm_entry: ScriptEntry) -> (MockBackend, MockBackend, Query) {
    let mut ls = MockScript::default();
    ls.insert(Q, ScriptEntry::new(llm_text()));
    let mut ss = MockScript::default();
    ss.insert(Q, slm_entry);
    let q = Query::new("q", Q, TaskKind::MathNumeric, Some("42".into())).unwrap();
    (
        MockBackend::new(BackendSpec::mock("slm", Role::Slm), ss),
        MockBackend::new(BackendSpec::mock("llm", Role::Llm), ls),
        q,
    )
}

fn hint_at(n: usize) -> FixedPredictor {
    FixedPredictor::new(FeatureMode::Proactive, 0.9, (n as f64).ln_1p())
}

#[test]
fn hint_of_40_rescues_the_slm() {
    let (slm, llm, q) = setup(ScriptEntry::new("maybe 41").hint_rule(40, None, "then it is 42"));
    let judge = ExactMatchJudge::default();
    let ex = Executor::new(&slm, &llm, &judge, CostModel::hosted_70b_free_slm(), PolicyConfig::preset("gsm8k").unwrap());
    let o = ex.run_proactive(&q, &hint_at(40)).unwrap();
    assert_eq!(o.decision, Decision::Hint(40));
    assert_eq!(o.correct, Some(true));
    assert_eq!(o.usage.llm.output_tokens, 40);
    assert_eq!(o.extracted_answer, "42");
    assert_eq!(o.dollars, o.recompute_dollars(&CostModel::hosted_70b_free_slm()));
}

#[test]
fn slm_only_never_touches_llm() {
    let (slm, llm, q) = setup(ScriptEntry::new("42"));
    let judge = ExactMatchJudge::default();
    let ex = Executor::new(&slm, &llm, &judge, CostModel::hosted_70b_free_slm(), PolicyConfig::default());
    let o = ex.run_proactive(&q, &FixedPredictor::new(FeatureMode::Proactive, 0.1, 3.0)).unwrap();
    assert_eq!((o.decision, o.rule), (Decision::SlmOnly, Rule::BelowAlpha));
    assert_eq!(llm.calls(), 0);
    assert_eq!(o.usage.llm.input_tokens + o.usage.llm.output_tokens, 0);
    assert_eq!(o.dollars.pico(), 0);
}

#[test]
fn full_llm_never_touches_slm() {
    let (slm, llm, q) = setup(ScriptEntry::new("7"));
    let judge = ExactMatchJudge::default();
    let ex = Executor::new(&slm, &llm, &judge, CostModel::hosted_70b_free_slm(), PolicyConfig::preset("gsm8k").unwrap());
    let o = ex.run_proactive(&q, &hint_at(500)).unwrap();
    assert_eq!(o.decision, Decision::FullLlm);
    assert_eq!(slm.calls(), 0);
    assert_eq!(o.correct, Some(true));
    assert_eq!(o.usage.llm.output_tokens, 122);
}

#[test]
fn reactive_consensus_short_circuits() {
    let (slm, llm, q) = setup(ScriptEntry::new("8"));
    let judge = ExactMatchJudge::default();
    let ex = Executor::new(&slm, &llm, &judge, CostModel::hosted_70b_free_slm(), PolicyConfig::preset("gsm8k").unwrap());
    let o = ex.run_reactive(&q, &hint_at(20)).unwrap();
    assert_eq!((o.decision, o.rule), (Decision::SlmOnly, Rule::Consensus));
    assert_eq!(o.extracted_answer, "8");
    assert_eq!(llm.calls(), 0);
    assert_eq!(o.usage.llm, Default::default());
    assert_eq!(slm.calls(), 3);
}

#[test]
fn reactive_disagreement_invokes_predictor() {
    let entry = ScriptEntry::new("it is 1")
        .sample(1, ScriptedResponse::text("it is 1"))
        .sample(2, ScriptedResponse::text("it is 2"))
        .sample(3, ScriptedResponse::text("it is 3"))
        .hint_rule(20, None, "hence 42");
    let (slm, llm, q) = setup(entry);
    let judge = ExactMatchJudge::default();
    let ex = Executor::new(&slm, &llm, &judge, CostModel::hosted_70b_free_slm(), PolicyConfig::preset("gsm8k").unwrap());
    let o = ex.run_reactive(&q, &FixedPredictor::new(FeatureMode::Reactive, 0.9, 21f64.ln())).unwrap();
    assert_eq!(o.decision, Decision::Hint(20));
    assert_eq!(o.correct, Some(true));
    assert_eq!(o.usage.llm.output_tokens, 20);
    assert!(o.usage.slm.output_tokens > 0);
}

#[test]
fn single_sample_quorum_always_agrees() {
    let (slm, llm, q) = setup(ScriptEntry::new("no idea"));
    let judge = ExactMatchJudge::default();
    let cfg = PolicyConfig { samples: 1, quorum: 1, ..PolicyConfig::default() };
    let ex = Executor::new(&slm, &llm, &judge, CostModel::default(), cfg);
    // "no idea" has no number, so the answer is empty and cannot form a quorum
    let o = ex.run_reactive(&q, &FixedPredictor::new(FeatureMode::Reactive, 0.0, 0.0)).unwrap();
    assert_eq!(o.rule, Rule::BelowAlpha);
    let (slm, llm, q) = setup(ScriptEntry::new("5"));
    let ex = Executor::new(&slm, &llm, &judge, CostModel::default(), cfg);
    let o = ex.run_reactive(&q, &FixedPredictor::new(FeatureMode::Reactive, 1.0, 9.0)).unwrap();
    assert_eq!(o.rule, Rule::Consensus);
    assert_eq!(llm.calls(), 0);
}

#[test]
fn backend_failure_reports_partial_usage() {
    let (slm, llm, q) = setup(ScriptEntry::new("1").hint_rule(1, None, "42"));
    slm.fail_next(1);
    let judge = ExactMatchJudge::default();
    let ex = Executor::new(&slm, &llm, &judge, CostModel::hosted_70b_free_slm(), PolicyConfig::default());
    let err = ex.run_proactive(&q, &hint_at(30)).unwrap_err();
    assert_eq!(err.decision, Some(Decision::Hint(30)));
    assert_eq!(err.stage, "shepherded completion");
    assert_eq!(err.usage.llm.output_tokens, 30);
}

#[test]
fn outcome_log_round_trip() {
    let (slm, llm, q) = setup(ScriptEntry::new("maybe 41").hint_rule(40, None, "then it is 42"));
    let judge = ExactMatchJudge::default();
    let ex = Executor::new(&slm, &llm, &judge, CostModel::hosted_70b_free_slm(), PolicyConfig::default());
    let outs = vec![ex.run_proactive(&q, &hint_at(40)).unwrap(), ex.run_decision(&q, Decision::FullLlm, Rule::Static).unwrap()];
    let mut buf = Vec::new();
    write_outcomes(&mut buf, &outs).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("{\"schema\":\"shepherd-eval/1\""));
    assert_eq!(read_outcomes(&buf[..]).unwrap(), outs);
}

fn arb_pred() -> impl Strategy<Value = Prediction> {
    (0.0f64..=1.0, -5.0f64..12.0).prop_map(|(p, r)| Prediction { hint_logit: 0.0, hint_prob: p, size_log: r })
}

proptest! {
    #[test]
    fn raising_alpha_never_adds_escalations(preds in prop::collection::vec(arb_pred(), 1..50), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let count = |alpha| preds.iter().filter(|p| {
            map_to_decision(p, &PolicyConfig { alpha, ..PolicyConfig::default() }).0 != Decision::SlmOnly
        }).count();
        prop_assert!(count(hi) <= count(lo));
    }

    #[test]
    fn decisions_respect_bounds(p in arb_pred(), eta in 0usize..200) {
        let cfg = PolicyConfig { eta_hint: eta, ..PolicyConfig::default() };
        if let (Decision::Hint(n), _) = map_to_decision(&p, &cfg) {
            prop_assert!(n > 0 && n <= eta && n <= cfg.n_max);
        }
    }

    #[test]
    fn consensus_count_is_order_free(mut v in prop::collection::vec(prop::sample::select(vec!["1", "2", "3", ""]), 1..8), k in 1usize..5) {
        let a = consensus(&v, k).map(str::to_owned);
        v.reverse();
        let b = consensus(&v, k).map(str::to_owned);
        prop_assert_eq!(a.is_some(), b.is_some());
        if let Some(x) = a {
            prop_assert!(v.iter().filter(|s| **s == x).count() >= k);
        }
    }
}
