use shepherd_core::answer::ExactMatchJudge;
use shepherd_core::labeling::{label_dataset, LabelConfig};
use shepherd_core::par::Exec;
use shepherd_core::simulator::{
    build_mocks, generate_trace, preset, run_experiment, synth_quality, trace_shares, CalibrationTarget,
    ExperimentConfig, GeneratorConfig, Strategy,
};
use shepherd_core::CostModel;

fn all_strategies() -> Vec<Strategy> {
    vec![Strategy::LlmOnly, Strategy::SlmOnly, Strategy::Oracle, Strategy::Proactive, Strategy::Reactive]
}

#[test]
fn labels_match_brute_force_with_windows() {
    let cfg = GeneratorConfig { failure_window_rate: 0.3, ..Default::default() };
    let trace = generate_trace(&preset("cnk12").unwrap(), 300, 21, &cfg, Exec::Parallel).unwrap();
    let (slm, llm) = build_mocks(&trace, Exec::Parallel);
    let queries: Vec<_> = trace.iter().map(|s| s.query.clone()).collect();
    let run = label_dataset(&queries, &slm, &llm, &ExactMatchJudge::default(), &LabelConfig::default(), CostModel::default(), Exec::Parallel);
    assert!(run.skipped.is_empty());
    for (sq, ex) in trace.iter().zip(&run.examples) {
        let brute = ex.grid.iter().copied().find(|&n| synth_quality(sq, n)).unwrap_or(sq.llm_len);
        assert_eq!(ex.n_star, brute, "{}", sq.query.id);
        if sq.failure_window.is_none() {
            assert_eq!(ex.n_star, sq.n_star);
        }
    }
}

#[test]
fn off_grid_labels_round_up_to_the_grid() {
    let cfg = GeneratorConfig { off_grid: true, failure_window_rate: 0.0, ..Default::default() };
    let trace = generate_trace(&preset("cnk12").unwrap(), 200, 4, &cfg, Exec::Parallel).unwrap();
    let (slm, llm) = build_mocks(&trace, Exec::Parallel);
    let queries: Vec<_> = trace.iter().map(|s| s.query.clone()).collect();
    let run = label_dataset(&queries, &slm, &llm, &ExactMatchJudge::default(), &LabelConfig::default(), CostModel::default(), Exec::Parallel);
    for (sq, ex) in trace.iter().zip(&run.examples) {
        assert!(ex.n_star >= sq.n_star);
    }
}

#[test]
fn generator_shares_track_profile() {
    let p = preset("gsm8k").unwrap();
    let trace = generate_trace(&p, 20_000, 1, &GeneratorConfig::default(), Exec::Parallel).unwrap();
    let (zero, buckets, unsolvable) = trace_shares(&trace);
    assert!((zero - p.p_zero).abs() < 0.01, "{zero}");
    assert!((unsolvable - p.p_unsolvable).abs() < 0.01);
    for (b, m) in buckets.iter().zip(p.bucket_masses) {
        assert!((b - m).abs() < 0.01);
    }
}

#[test]
fn empty_trace_gives_empty_report() {
    let r = run_experiment(&[], &all_strategies(), &CostModel::hosted_70b_free_slm(), 0, &ExperimentConfig::default(), Exec::Parallel).unwrap();
    assert!(r.rows.is_empty());
    assert!(r.dominance.is_none());
}

#[test]
fn oracle_is_perfect_and_cheapest() {
    let trace = generate_trace(&preset("cnk12").unwrap(), 600, 8, &GeneratorConfig::default(), Exec::Parallel).unwrap();
    let cm = CostModel::hosted_70b_free_slm();
    let r = run_experiment(&trace, &all_strategies(), &cm, 8, &ExperimentConfig::default(), Exec::Parallel).unwrap();
    let dom = r.dominance.as_ref().unwrap();
    assert_eq!(dom.route_total, dom.casc_total);
    assert!(dom.shep_total <= dom.route_total);
    let oracle = r.results.iter().find(|x| x.strategy == "Oracle Shep.").unwrap();
    assert_eq!(oracle.accuracy, 100.0);
    for other in &r.results {
        if other.accuracy == 100.0 {
            assert!(oracle.cost <= other.cost, "{}", other.strategy);
        }
    }
    let llm_row = r.rows.iter().find(|x| x.strategy == "LLM").unwrap();
    assert_eq!(llm_row.ace, Some(1.0));
}

#[test]
fn learned_reactive_policy_beats_llm_on_separable_trace() {
    let gcfg = GeneratorConfig { text_signal: 1.0, failure_window_rate: 0.0, ..Default::default() };
    let trace = generate_trace(&preset("gsm8k").unwrap(), 800, 3, &gcfg, Exec::Parallel).unwrap();
    let cfg = ExperimentConfig { generator: gcfg, calibration: CalibrationTarget::AccuracyFraction(0.9), ..Default::default() };
    let r = run_experiment(&trace, &[Strategy::LlmOnly, Strategy::Reactive], &CostModel::hosted_70b_free_slm(), 3, &cfg, Exec::Parallel).unwrap();
    let reactive = r.rows.iter().find(|x| x.strategy == "Reactive Shep.").unwrap();
    assert!(reactive.ace.unwrap() > 1.0, "{r:#?}");
}

#[test]
fn experiments_are_reproducible() {
    let trace = generate_trace(&preset("gsm8k").unwrap(), 300, 5, &GeneratorConfig::default(), Exec::Parallel).unwrap();
    let cm = CostModel::hosted_70b_free_slm();
    let cfg = ExperimentConfig::default();
    let a = run_experiment(&trace, &all_strategies(), &cm, 5, &cfg, Exec::Parallel).unwrap();
    let b = run_experiment(&trace, &all_strategies(), &cm, 5, &cfg, Exec::Sequential).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
