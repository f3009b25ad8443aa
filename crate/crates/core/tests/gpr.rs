use battsec::gpr::{
    grid_search_length_scale, kernel, GprBank, GprHyper, GprModel, GprSettings, RegionDataset,
    TrainingRow,
};
use battsec::Exec;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sin_data(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![std::f64::consts::PI * i as f64 / (n - 1) as f64])
        .collect();
    let y = x.iter().map(|r| r[0].sin()).collect();
    (x, y)
}

fn sin_hyper() -> GprHyper {
    GprHyper {
        length_scales: vec![0.3],
        signal_var: 1.0,
        noise_var: 1e-10,
        jitter: 1e-12,
    }
}

/// Posterior mean and variance through an explicit inverse of the Gram
/// matrix.
fn direct_inverse_gp(
    x: &[Vec<f64>],
    y: &[f64],
    hyper: &GprHyper,
    diag: f64,
    x_star: &[f64],
) -> (f64, f64) {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        kernel(&x[i], &x[j], hyper) + if i == j { diag } else { 0.0 }
    });
    let k_inv = k.try_inverse().expect("invertible Gram matrix");
    let ks = DVector::from_fn(n, |i, _| kernel(&x[i], x_star, hyper));
    let yv = DVector::from_column_slice(y);
    let mean = ks.dot(&(&k_inv * yv));
    let var = kernel(x_star, x_star, hyper) - ks.dot(&(&k_inv * &ks));
    (mean, var)
}

#[test]
fn interpolates_noise_free_sine() {
    let (x, y) = sin_data(20);
    let hyper = sin_hyper();
    let m = GprModel::fit(x.clone(), y.clone(), hyper.clone()).unwrap();
    for (xi, yi) in x.iter().zip(&y) {
        let (mean, var) = m.predict(xi);
        assert!((mean - yi).abs() <= 1e-6, "x = {}: {mean} vs {yi}", xi[0]);
        assert!(var <= hyper.noise_var + 10.0 * hyper.jitter, "variance {var:e}");
    }
}

#[test]
fn matches_direct_inverse_gp() {
    let (x, y) = sin_data(20);
    let hyper = sin_hyper();
    let m = GprModel::fit(x.clone(), y.clone(), hyper.clone()).unwrap();
    let diag = hyper.noise_var + m.jitter_used;
    for k in 0..=50 {
        let xs = [-0.3 + 3.7 * k as f64 / 50.0];
        let (mean, var) = m.predict(&xs);
        let (om, ov) = direct_inverse_gp(&x, &y, &hyper, diag, &xs);
        assert!((mean - om).abs() <= 1e-8, "mean at {}: {mean} vs {om}", xs[0]);
        assert!((var - ov.max(0.0)).abs() <= 1e-8, "var at {}: {var} vs {ov}", xs[0]);
    }
}

#[test]
fn matches_direct_inverse_on_random_4d_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let y: Vec<f64> = x.iter().map(|r| r[0].sin() + 0.3 * r[1] * r[2] - r[3]).collect();
    let hyper = GprHyper {
        length_scales: vec![1.0, 1.5, 0.8, 2.0],
        signal_var: 2.0,
        noise_var: 1e-4,
        jitter: 1e-10,
    };
    let m = GprModel::fit(x.clone(), y.clone(), hyper.clone()).unwrap();
    for _ in 0..30 {
        let xs: Vec<f64> = (0..4).map(|_| rng.random_range(-2.5..2.5)).collect();
        let (mean, var) = m.predict(&xs);
        let (om, ov) = direct_inverse_gp(&x, &y, &hyper, hyper.noise_var + m.jitter_used, &xs);
        assert!((mean - om).abs() <= 1e-8);
        assert!((var - ov.max(0.0)).abs() <= 1e-8);
        assert_eq!(m.predict_mean(&xs), mean);
    }
}

#[test]
fn cholesky_reconstructs_gram() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let hyper = GprHyper {
        length_scales: vec![0.9; 4],
        signal_var: 1.3,
        noise_var: 1e-3,
        jitter: 1e-10,
    };
    let m = GprModel::fit(x.clone(), y, hyper.clone()).unwrap();
    let l = m.chol_factor();
    let n = l.dim();
    for i in 0..n {
        for j in 0..n {
            let llt: f64 = (0..n).map(|k| l.get(i, k) * l.get(j, k)).sum();
            let kij = kernel(&x[i], &x[j], &hyper)
                + if i == j { hyper.noise_var + m.jitter_used } else { 0.0 };
            assert!((llt - kij).abs() <= 1e-8 * kij.abs().max(1.0));
            if j > i {
                assert_eq!(l.get(i, j), 0.0);
            }
        }
    }
}

#[test]
fn single_point_likelihood_closed_form() {
    let hyper = GprHyper {
        length_scales: vec![1.0, 1.0],
        signal_var: 0.7,
        noise_var: 0.01,
        jitter: 1e-12,
    };
    let m = GprModel::fit(vec![vec![0.3, -0.2]], vec![0.0], hyper).unwrap();
    let s: f64 = 0.7 + 0.01 + 1e-12;
    let expected = -0.5 * s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((m.log_marginal_likelihood() - expected).abs() < 1e-12);
}

#[test]
fn likelihood_invariant_under_row_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
    let hyper = GprHyper {
        length_scales: vec![1.0; 4],
        signal_var: 1.0,
        noise_var: 1e-2,
        jitter: 1e-10,
    };
    let a = GprModel::fit(x.clone(), y.clone(), hyper.clone()).unwrap();
    let perm: Vec<usize> = (0..30).rev().collect();
    let xp = perm.iter().map(|&i| x[i].clone()).collect();
    let yp = perm.iter().map(|&i| y[i]).collect();
    let b = GprModel::fit(xp, yp, hyper).unwrap();
    assert!((a.log_marginal_likelihood() - b.log_marginal_likelihood()).abs() < 1e-9);
    let probe = [0.1, 0.2, -0.3, 0.4];
    assert!((a.predict(&probe).0 - b.predict(&probe).0).abs() < 1e-10);
}

#[test]
fn mean_is_linear_in_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<Vec<f64>> = (0..25)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y1: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y2: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sum: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a + b).collect();
    let hyper = GprHyper {
        length_scales: vec![0.8; 4],
        signal_var: 1.0,
        noise_var: 1e-3,
        jitter: 1e-10,
    };
    let m1 = GprModel::fit(x.clone(), y1, hyper.clone()).unwrap();
    let m2 = GprModel::fit(x.clone(), y2, hyper.clone()).unwrap();
    let ms = GprModel::fit(x, sum, hyper).unwrap();
    for _ in 0..20 {
        let xs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = ms.predict(&xs).0;
        let rhs = m1.predict(&xs).0 + m2.predict(&xs).0;
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn grid_search_recovers_generating_length_scale() {
    // Draw a sample path from a GP with length scale 0.5 and check that the
    // likelihood grid picks the same cell.
    let true_ls = 0.5;
    let n = 80;
    let x: Vec<Vec<f64>> = (0..n).map(|i| vec![4.0 * i as f64 / (n - 1) as f64]).collect();
    let hyper = GprHyper {
        length_scales: vec![true_ls],
        signal_var: 1.0,
        noise_var: 1e-4,
        jitter: 1e-10,
    };
    let k = DMatrix::from_fn(n, n, |i, j| {
        kernel(&x[i], &x[j], &hyper) + if i == j { hyper.noise_var } else { 0.0 }
    });
    let l = k.cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = DVector::from_fn(n, |_, _| {
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let y: Vec<f64> = (l * z).iter().copied().collect();
    let grid = [0.125, 0.25, 0.5, 1.0, 2.0];
    let (best, _) =
        grid_search_length_scale(&x, &y, &hyper, &grid, false, Exec::Sequential).unwrap();
    assert_eq!(best, true_ls);
}

#[test]
fn model_text_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let y: Vec<f64> = x.iter().map(|r| r[0] * 0.01 - r[3] * 0.002).collect();
    let hyper = GprHyper {
        length_scales: vec![1.0; 4],
        signal_var: 1e-4,
        noise_var: 1e-6,
        jitter: 1e-10,
    };
    let m = GprModel::fit_standardized(x, y, hyper, Exec::Sequential).unwrap();
    let mut buf = Vec::new();
    m.write_text(&mut buf).unwrap();
    let back = GprModel::read_text(&buf[..], std::path::Path::new("mem")).unwrap();
    for _ in 0..20 {
        let xs: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert_eq!(m.predict(&xs), back.predict(&xs));
    }
    assert!(GprModel::read_text(&b"n 1\nbogus 2\n"[..], std::path::Path::new("x")).is_err());
}

fn synthetic_datasets() -> Vec<RegionDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    (1..=6)
        .map(|region| RegionDataset {
            region,
            rows: (0..40)
                .map(|i| {
                    let features = [
                        5.0,
                        0.3 + 0.1 * region as f64 + 0.001 * i as f64,
                        3.7 + rng.random_range(0.0..0.2),
                        rng.random_range(-0.01..0.01),
                    ];
                    TrainingRow {
                        t: i as f64,
                        onset: 0.0,
                        features,
                        target: 0.05 * features[2] - features[3],
                    }
                })
                .collect(),
        })
        .collect()
}

#[test]
fn bank_save_load_round_trip() {
    let datasets = synthetic_datasets();
    let settings = GprSettings::default();
    let bank = GprBank::train(&datasets, &settings, Exec::default()).unwrap();
    assert_eq!(bank.regions(), vec![1, 2, 3, 4, 5, 6]);
    let dir = tempfile::tempdir().unwrap();
    bank.save(dir.path()).unwrap();
    let back = GprBank::load(dir.path()).unwrap();
    let f = [5.0, 0.55, 3.8, 0.002];
    assert_eq!(bank.e2(f, 2).unwrap(), back.e2(f, 2).unwrap());
    let empty = tempfile::tempdir().unwrap();
    assert!(GprBank::load(empty.path()).is_err());
}

#[test]
fn bank_training_is_execution_independent() {
    let datasets = synthetic_datasets();
    let settings = GprSettings {
        grid: vec![0.5, 1.0, 2.0],
        ..GprSettings::default()
    };
    let seq = GprBank::train(&datasets, &settings, Exec::Sequential).unwrap();
    let par = GprBank::train(&datasets, &settings, Exec::Parallel).unwrap();
    for region in 1..=6 {
        let f = [5.0, 0.3 + 0.1 * region as f64, 3.8, 0.0];
        assert_eq!(seq.e2(f, region).unwrap(), par.e2(f, region).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gram_matrices_factorize(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y = vec![0.0; n];
        let hyper = GprHyper {
            length_scales: vec![1.0; 4],
            signal_var: 1.0,
            noise_var: 1e-6,
            jitter: 1e-10,
        };
        prop_assert!(GprModel::fit(x, y, hyper).is_ok());
    }

    #[test]
    fn variance_at_training_inputs_is_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hyper = GprHyper {
            length_scales: vec![0.5; 4],
            signal_var: 1.0,
            noise_var: 1e-4,
            jitter: 1e-8,
        };
        let m = GprModel::fit(x.clone(), y, hyper.clone()).unwrap();
        for xi in &x {
            prop_assert!(m.predict(xi).1 <= hyper.noise_var + 10.0 * hyper.jitter);
        }
    }
}
