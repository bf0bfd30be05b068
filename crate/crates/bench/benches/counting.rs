use bpgat::bp::{estimate_ln_count, BpOptions};
use bpgat::exact::count_dpll;
use bpgat::neural::{loss_and_grad, Model, ModelConfig, ModelGraph, Variant};
use bpgat_bench::formulas;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

fn exact(c: &mut Criterion) {
    let fs = formulas((15, 25), (20, 40), 8, 1);
    c.bench_function("dpll/15-25 vars", |b| {
        b.iter(|| fs.iter().map(|f| count_dpll(black_box(f)).unwrap().count.bits()).sum::<u64>())
    });
}

fn bp(c: &mut Criterion) {
    let graphs: Vec<_> = formulas((10, 30), (20, 50), 8, 2).iter().map(|f| ModelGraph::from_cnf(f).unwrap()).collect();
    let opts = BpOptions { max_iters: 50, ..BpOptions::default() };
    c.bench_function("bp/50 iterations", |b| {
        b.iter(|| graphs.iter().map(|g| estimate_ln_count(black_box(&g.fg), &opts).ln_z).sum::<f64>())
    });
}

fn neural(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    let small: Vec<_> = formulas((10, 20), (15, 35), 8, 3).iter().map(|f| ModelGraph::from_cnf(f).unwrap()).collect();
    for v in [Variant::Bpgat, Variant::Bpnn] {
        let m = Model::new(ModelConfig::with_variant(v)).unwrap();
        group.bench_function(format!("{v}/forward"), |b| {
            b.iter(|| small.iter().map(|g| m.predict(black_box(g)).unwrap().ln_z).sum::<f64>())
        });
        group.bench_function(format!("{v}/forward+backward"), |b| {
            b.iter(|| small.iter().map(|g| loss_and_grad(&m.params, &m.config, g, 1.0).unwrap().0).sum::<f64>())
        });
    }
    let large = formulas((400, 400), (280, 280), 1, 4);
    let m = Model::new(ModelConfig::default()).unwrap();
    group.sample_size(10);
    group.bench_function("bpgat/forward 400 vars", |b| {
        b.iter_batched(
            || ModelGraph::from_cnf(&large[0]).unwrap(),
            |g| m.predict(&g).unwrap().ln_z,
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, exact, bp, neural);
criterion_main!(benches);
