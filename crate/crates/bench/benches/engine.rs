use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gcldr_bench::{bundle, filled, labels};
use gcldr_core::autodiff::{Mode, Tape};
use gcldr_core::eval::make_variant;
use gcldr_core::ldd::{compute_posteriors, LddHeads, Space};
use gcldr_core::model::{BundleConfig, Forward, Trainable};
use gcldr_core::trainer::{train_step, ClassPrior, Optimizers, TrainConfig, Variant};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [64, 128, 256] {
        let (a, b) = (filled(n, n, 1), filled(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
                let p = tape.matmul(va, vb).unwrap();
                let s = tape.sum(p);
                tape.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn posteriors(c: &mut Criterion) {
    let model = bundle(64, 32);
    let x = filled(512, 20, 3);
    let y = labels(512, 6);
    c.bench_function("posteriors_b512", |bench| {
        bench.iter(|| {
            let mut fwd = Forward::new(&model, Mode::Infer, Trainable::Nothing, 0);
            let f = model.forward_features(&mut fwd, &x).unwrap();
            let heads = LddHeads::new(&model.local_cd, model.d_cd.as_ref().unwrap()).unwrap();
            compute_posteriors(&mut fwd, &heads, f.cd, &y, Space::ClassDependent).unwrap()
        })
    });
}

fn steps(c: &mut Criterion) {
    let x = filled(128, 20, 4);
    let y = labels(128, 6);
    let prior = ClassPrior::uniform(6);
    let mut group = c.benchmark_group("train_step_b128");
    group.sample_size(20);
    for variant in [Variant::Direct, Variant::Full, Variant::Meta] {
        let cfg = TrainConfig { variant, ..TrainConfig::default() };
        let start = make_variant(&BundleConfig { mapping_width: 64, feature_width: 32, ..BundleConfig::new(20, 6, 2) }, variant).unwrap();
        group.bench_function(variant.name(), |bench| {
            let mut model = start.clone();
            let mut opts = Optimizers::new(&model, &cfg).unwrap();
            let mut seed = 0;
            bench.iter(|| {
                seed += 1;
                train_step(&mut model, &x, &y, &cfg, &mut opts, &prior, seed).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, posteriors, steps);
criterion_main!(benches);
