use covct_core::aggregate::{assemble_features, FEATURE_DIM};
use covct_core::heads::{
    grad_check, predict_head, train_head, train_on_vectors, train_with, HeadKind, HeadModel, Sam, Sgd, TrainConfig,
};
use covct_core::Label;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain nested-loop forward pass written against the public accessors.
fn forward_oracle(m: &HeadModel, x: &[f64]) -> [f64; 2] {
    let d = m.input_dim();
    let layer = |w: &[f64], b: &[f64], input: &[f64], rows: usize| -> Vec<f64> {
        let cols = input.len();
        (0..rows)
            .map(|r| {
                let mut acc = b[r];
                for c in 0..cols {
                    acc += w[r * cols + c] * input[c];
                }
                acc
            })
            .collect()
    };
    let z = match m.kind() {
        HeadKind::LogReg => layer(m.w1(), m.b1(), x, 2),
        HeadKind::Mlp => {
            let h: Vec<f64> = layer(m.w1(), m.b1(), x, m.hidden())
                .into_iter()
                .map(|a| if a > 0.0 { a } else { 0.0 })
                .collect();
            layer(m.w2().unwrap(), m.b2().unwrap(), &h, 2)
        }
    };
    assert_eq!(x.len(), d);
    let p0 = 1.0 / (1.0 + (z[1] - z[0]).exp());
    [p0, 1.0 - p0]
}

#[test]
fn forward_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..40 {
        let kind = if trial % 2 == 0 {
            HeadKind::LogReg
        } else {
            HeadKind::Mlp
        };
        let m = HeadModel::init(kind, FEATURE_DIM, 100, trial).unwrap();
        let rows: Vec<[f64; 3]> = (0..96)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..0.5);
                let b: f64 = rng.random_range(0.0..0.5);
                [a, b, 1.0 - a - b]
            })
            .collect();
        let fm = assemble_features(&rows).unwrap();
        let got = predict_head(&m, &fm).unwrap();
        let want = forward_oracle(&m, &fm.flatten());
        for c in 0..2 {
            assert!((got[c] - want[c]).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}

fn clusters(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let covid = i % 2 == 0;
        // covid rows lean on p_covid, the rest on p_healthy
        let rows: Vec<[f64; 3]> = (0..96)
            .map(|_| {
                let strong: f64 = rng.random_range(0.6..0.9);
                let rest = 1.0 - strong;
                if covid {
                    [strong, rest / 2.0, rest / 2.0]
                } else {
                    [rest / 2.0, rest / 2.0, strong]
                }
            })
            .collect();
        xs.push(assemble_features(&rows).unwrap().flatten());
        ys.push(if covid { Label::Covid } else { Label::NonCovid });
    }
    (xs, ys)
}

fn accuracy(m: &HeadModel, xs: &[Vec<f64>], ys: &[Label]) -> f64 {
    let ok = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| m.predict_label(x).unwrap() == **y)
        .count();
    ok as f64 / xs.len() as f64
}

#[test]
fn separable_clusters_are_fit() {
    let (xs, ys) = clusters(60, 1);
    for kind in [HeadKind::LogReg, HeadKind::Mlp] {
        let cfg = TrainConfig {
            seed: 5,
            ..TrainConfig::default()
        };
        let m = train_on_vectors(&xs, &ys, kind, &cfg).unwrap();
        assert_eq!(accuracy(&m, &xs, &ys), 1.0, "{kind:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let (xs, ys) = clusters(40, 2);
    let features: Vec<_> = xs
        .iter()
        .map(|x| {
            let rows: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            assemble_features(&rows).unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 20,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train_head(&features, &ys, HeadKind::Mlp, &cfg).unwrap();
    let b = train_head(&features, &ys, HeadKind::Mlp, &cfg).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    let c = train_head(&features, &ys, HeadKind::Mlp, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn sam_with_zero_radius_is_sgd() {
    let (xs, ys) = clusters(30, 3);
    let cfg = TrainConfig {
        epochs: 10,
        warmup_epochs: 2,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    for kind in [HeadKind::LogReg, HeadKind::Mlp] {
        let mut sgd_traj = Vec::new();
        train_with(&xs, &ys, kind, &cfg, &mut Sgd, |_, m| {
            sgd_traj.push(m.params().to_vec())
        })
        .unwrap();
        let mut sam_traj = Vec::new();
        train_with(&xs, &ys, kind, &cfg, &mut Sam { rho: 0.0 }, |_, m| {
            sam_traj.push(m.params().to_vec())
        })
        .unwrap();
        assert_eq!(sgd_traj.len(), 40);
        for (a, b) in sgd_traj.iter().zip(&sam_traj) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
        let mut sharp = Vec::new();
        train_with(&xs, &ys, kind, &cfg, &mut Sam { rho: 0.5 }, |_, m| {
            sharp.push(m.params().to_vec())
        })
        .unwrap();
        assert_ne!(sharp.last(), sgd_traj.last());
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..20 {
        let kind = if trial % 2 == 0 {
            HeadKind::LogReg
        } else {
            HeadKind::Mlp
        };
        let d = rng.random_range(1..=12);
        let m = HeadModel::init(kind, d, 8, trial).unwrap();
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| (x.as_slice(), rng.random_range(0..2))).collect();
        let err = grad_check(&m, &batch, 0.1).unwrap();
        assert!(err < 1e-4, "trial {trial}: {err}");
    }
}

#[test]
fn empty_batch_rejected() {
    let m = HeadModel::init(HeadKind::LogReg, 3, 0, 0).unwrap();
    assert!(grad_check(&m, &[], 0.0).is_err());
}

proptest! {
    #[test]
    fn predictions_are_distributions(seed in any::<u64>(), scale in 0.0f64..50.0, mlp in any::<bool>()) {
        let kind = if mlp { HeadKind::Mlp } else { HeadKind::LogReg };
        let mut m = HeadModel::init(kind, 10, 6, seed).unwrap();
        for p in m.params_mut() {
            *p *= scale;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-100.0..100.0)).collect();
        let p = m.predict_vec(&x).unwrap();
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p[0] + p[1] - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn unsmoothed_is_plain_cross_entropy(p in 0.001f64..0.999, target in 0usize..2) {
        let probs = [p, 1.0 - p];
        let got = covct_core::heads::smoothed_cross_entropy(&probs, target, 0.0).unwrap();
        prop_assert_eq!(got, -probs[target].ln());
    }
}
