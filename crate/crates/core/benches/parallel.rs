use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use shepherd_core::answer::ExactMatchJudge;
use shepherd_core::labeling::{label_dataset, LabelConfig};
use shepherd_core::metrics::{sweep, CalibrationGrid, RescoreItem};
use shepherd_core::par::Exec;
use shepherd_core::predictor::Prediction;
use shepherd_core::simulator::{build_mocks, generate_trace, preset, GeneratorConfig};
use shepherd_core::CostModel;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn trace_generation(c: &mut Criterion) {
    let p = preset("cnk12").unwrap();
    let cfg = GeneratorConfig::default();
    let mut g = c.benchmark_group("generate_trace_5000");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_trace(&p, 5000, 7, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn labeling(c: &mut Criterion) {
    let trace = generate_trace(&preset("cnk12").unwrap(), 400, 7, &GeneratorConfig::default(), Exec::Parallel).unwrap();
    let (slm, llm) = build_mocks(&trace, Exec::Parallel);
    let queries: Vec<_> = trace.iter().map(|s| s.query.clone()).collect();
    let judge = ExactMatchJudge::default();
    let cfg = LabelConfig::default();
    let mut g = c.benchmark_group("label_dataset_400");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| label_dataset(black_box(&queries), &slm, &llm, &judge, &cfg, CostModel::hosted_70b_free_slm(), exec))
        });
    }
    g.finish();
}

fn calibration_sweep(c: &mut Criterion) {
    let trace = generate_trace(&preset("gsm8k").unwrap(), 500, 3, &GeneratorConfig::default(), Exec::Parallel).unwrap();
    let (slm, llm) = build_mocks(&trace, Exec::Parallel);
    let queries: Vec<_> = trace.iter().map(|s| s.query.clone()).collect();
    let cm = CostModel::hosted_70b_free_slm();
    let run = label_dataset(&queries, &slm, &llm, &ExactMatchJudge::default(), &LabelConfig::default(), cm, Exec::Parallel);
    let items: Vec<RescoreItem> = run
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let pred = Prediction { hint_logit: 0.0, hint_prob: (i % 100) as f64 / 100.0, size_log: (ex.n_star as f64).ln_1p() };
            RescoreItem::from_example(ex, &pred, &cm, 4096).unwrap()
        })
        .collect();
    let grid = CalibrationGrid::standard(1000);
    let mut g = c.benchmark_group("calibration_sweep_500x10100");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| sweep(black_box(&items), &grid, exec)));
    }
    g.finish();
}

criterion_group!(benches, trace_generation, labeling, calibration_sweep);
criterion_main!(benches);
