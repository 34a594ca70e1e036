use std::hint::black_box;

use covct_core::aggregate::{assemble_features, threshold_vote, VoteThresholds};
use covct_core::heads::{HeadKind, HeadModel, Optimizer, Sam, Sgd};
use covct_core::preprocess::resize_bilinear;
use covct_core::sampling::{inference_plan, train_sample, INFER_LEN};
use covct_core::{Image, Label};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn sampling(c: &mut Criterion) {
    let mut g = c.benchmark_group("sampling");
    for n in [100usize, 700, 2048] {
        g.bench_with_input(BenchmarkId::new("train_sample", n), &n, |b, &n| {
            b.iter(|| train_sample(black_box(n), 7).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("inference_plan", n), &n, |b, &n| {
            b.iter(|| inference_plan(black_box(n), INFER_LEN).unwrap())
        });
    }
    g.finish();
}

fn voting(c: &mut Criterion) {
    // 10 models x 3 sub-volumes x 8 flips
    let preds: Vec<(Label, f64)> = (0..240)
        .map(|i| {
            let label = if i % 3 == 0 { Label::NonCovid } else { Label::Covid };
            (label, f64::from(i % 20) / 20.0)
        })
        .collect();
    let t = VoteThresholds::new(0.7, 0.55).unwrap();
    c.bench_function("threshold_vote/240", |b| {
        b.iter(|| threshold_vote(black_box(&preds), &t).unwrap())
    });
}

fn resize(c: &mut Criterion) {
    let img = Image::from_fn(512, 512, |r, col| ((r * 31 + col * 17) % 256) as f32 / 255.0).unwrap();
    c.bench_function("resize_bilinear/512_to_224", |b| {
        b.iter(|| resize_bilinear(black_box(&img), 224, 224).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let rows: Vec<[f64; 3]> = (0..300)
        .map(|i| {
            let a = f64::from(i % 10) / 20.0;
            [a, 0.1, 0.9 - a]
        })
        .collect();
    let x = assemble_features(&rows).unwrap().flatten();
    let xs: Vec<Vec<f64>> = (0..32)
        .map(|i| x.iter().map(|v| v * (1.0 - f64::from(i) / 64.0)).collect())
        .collect();
    let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 2)).collect();

    let mut g = c.benchmark_group("train_step");
    for kind in [HeadKind::LogReg, HeadKind::Mlp] {
        let model = HeadModel::init(kind, x.len(), 100, 1).unwrap();
        g.bench_function(BenchmarkId::new("sgd", kind.as_str()), |b| {
            let mut m = model.clone();
            b.iter(|| Sgd.step(&mut m, black_box(&batch), 0.1, 1e-3))
        });
        g.bench_function(BenchmarkId::new("sam", kind.as_str()), |b| {
            let mut m = model.clone();
            let mut opt = Sam { rho: 0.05 };
            b.iter(|| opt.step(&mut m, black_box(&batch), 0.1, 1e-3))
        });
    }
    g.finish();
}

criterion_group!(benches, sampling, voting, resize, train_step);
criterion_main!(benches);
