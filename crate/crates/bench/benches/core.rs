use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use zdp_bench::blobs_fixture;
use zdp_core::accountant::{default_alphas, DeltaSpec, PrivacyLedger, RdpCurve, SamplingMode};
use zdp_core::ctensor::sample_circular_gaussian;
use zdp_core::mechanism::clip_conjugate_gradient;
use zdp_core::nn::{ActivationKind, Model};
use zdp_core::trainer::{per_sample_gradients, train_step, TrainConfig};
use zdp_core::wirtinger::value_and_grad;
use zdp_core::Rng;

fn backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("per_sample_backward");
    for kind in [
        ActivationKind::Cardioid,
        ActivationKind::IGaussian,
        ActivationKind::CRelu,
    ] {
        let (data, net, params) = blobs_fixture(kind);
        let (x, y) = data.get(0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(kind.key()), |b| {
            b.iter(|| value_and_grad(black_box(&params.tensors), |t, v| net.loss(t, v, x, y)).unwrap())
        });
    }
    group.finish();
}

fn lot_step(c: &mut Criterion) {
    let (data, net, params) = blobs_fixture(ActivationKind::Cardioid);
    let lot: Vec<usize> = (0..100).collect();
    c.bench_function("gradients_lot_100", |b| {
        b.iter(|| per_sample_gradients(&net, &params.tensors, &data, black_box(&lot)).unwrap())
    });
    let grads = per_sample_gradients(&net, &params.tensors, &data, &lot).unwrap();
    c.bench_function("clip_lot_100", |b| {
        b.iter(|| {
            for (_, g) in &grads {
                black_box(clip_conjugate_gradient(g, 1.0).unwrap());
            }
        })
    });
    let cfg = TrainConfig::private(1.0, 1.0, 0.05, 1.0, 1);
    c.bench_function("train_step_lot_100", |b| {
        b.iter(|| {
            let mut p = params.clone();
            train_step(&net, &mut p, &data, &lot, &cfg, 0, None).unwrap()
        })
    });
}

fn accounting(c: &mut Criterion) {
    let alphas = default_alphas();
    c.bench_function("rdp_curve_subsampled", |b| {
        b.iter(|| RdpCurve::step(black_box(&alphas), 1.0, 0.05).unwrap())
    });
    let mut ledger = PrivacyLedger::new(DeltaSpec::Fixed(1e-5), SamplingMode::Poisson).unwrap();
    ledger.record(1.0, 0.05, 1000).unwrap();
    c.bench_function("ledger_epsilon", |b| b.iter(|| black_box(&ledger).epsilon().unwrap()));
}

fn noise(c: &mut Criterion) {
    c.bench_function("circular_noise_1e5", |b| {
        let mut rng = Rng::new(0, 0);
        b.iter(|| sample_circular_gaussian(&[100_000], 1.0, &mut rng).unwrap())
    });
}

criterion_group!(benches, backward, lot_step, accounting, noise);
criterion_main!(benches);
