use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fairbounty_bench::{deep_list, three_groups};
use fairbounty_core::certify::certificate_statistic;
use fairbounty_core::predictor::fit_tree_classifier;
use fairbounty_core::{
    CheckerConfig, Classifier, Engine, Predictor, TreeParams, UpdateMode,
};

fn list_evaluation(c: &mut Criterion) {
    let data = three_groups(2_000, 1);
    let mut group = c.benchmark_group("list_predict");
    for depth in [1, 8, 32] {
        let list = deep_list(&data, depth);
        group.bench_with_input(BenchmarkId::from_parameter(depth), &list, |b, list| {
            b.iter(|| data.iter().map(|(x, _)| list.predict(black_box(x)) as usize).sum::<usize>())
        });
    }
    group.finish();
}

fn tree_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("tree_fit");
    group.sample_size(20);
    for rows in [1_000, 10_000] {
        let data = three_groups(rows, 2);
        group.bench_with_input(BenchmarkId::from_parameter(rows), &data, |b, data| {
            b.iter(|| fit_tree_classifier(data, TreeParams::new(6)).unwrap())
        });
    }
    group.finish();
}

fn statistic(c: &mut Criterion) {
    let data = three_groups(20_000, 3);
    let list = deep_list(&data, 8);
    let g = Predictor::equals(0, 1.0);
    let h = Predictor::constant(1);
    c.bench_function("certificate_statistic_20k", |b| {
        b.iter(|| certificate_statistic(&data, &list, &g, &h).unwrap())
    });
}

fn monotone_submissions(c: &mut Criterion) {
    let train = three_groups(10_000, 4);
    let holdout = Arc::new(three_groups(4_000, 5));
    let subs: Vec<(Predictor, Predictor)> = (0..3)
        .map(|k| {
            let g = Predictor::equals(0, f64::from(k));
            let rows: Vec<usize> = (0..train.len())
                .filter(|&i| g.predict(train.row(i)) == 1)
                .collect();
            (g, fit_tree_classifier(&train.subset(&rows), TreeParams::new(6)).unwrap())
        })
        .collect();
    let config = CheckerConfig::new(0.02, 10, 0.05).unwrap();
    c.bench_function("monotone_engine_3_groups", |b| {
        b.iter(|| {
            let mut engine =
                Engine::new(Predictor::constant(0), config, Arc::clone(&holdout), UpdateMode::Monotone)
                    .unwrap();
            for (g, h) in &subs {
                engine.submit(g.clone(), h.clone()).unwrap();
            }
            engine.model().level()
        })
    });
}

criterion_group!(benches, list_evaluation, tree_fit, statistic, monotone_submissions);
criterion_main!(benches);
