mod common;

use approx::assert_abs_diff_eq;
use battsec::koopman::{
    advance_window, build_hankel, coulomb_count, fit_koopman, predict_horizon,
    ridge_least_squares, select_feedback, FeedbackStacks, SlidingKoopman, WindowConfig,
};
use common::{random_inputs, rmse, ArxSystem};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hankel_layout() {
    let v: Vec<f64> = (0..8).map(|k| k as f64 * 1.5).collect();
    let (now, next) = build_hankel(&v, 3).unwrap();
    assert_eq!(now.shape(), (3, 5));
    for j in 0..5 {
        for i in 0..3 {
            assert_eq!(now[(i, j)], v[i + j]);
            assert_eq!(next[(i, j)], v[i + j + 1]);
        }
    }
    assert!(build_hankel(&v[..3], 3).is_err());
}

#[test]
fn ridge_solution_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for ridge in [0.0, 1e-6, 1e-3, 0.5] {
        let x = DMatrix::from_fn(7, 40, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(5, 40, |_, _| rng.random_range(-1.0..1.0));
        let w = ridge_least_squares(&x, &y, ridge).unwrap();
        let gram = &x * x.transpose() + DMatrix::identity(7, 7) * ridge;
        let oracle = (&y * x.transpose()) * gram.try_inverse().unwrap();
        assert!((w - oracle).amax() < 1e-10, "ridge {ridge}");
    }
}

#[test]
fn zero_regressor_is_numerical_error() {
    let x = DMatrix::zeros(3, 10);
    let y = DMatrix::zeros(2, 10);
    assert!(ridge_least_squares(&x, &y, 0.0).is_err());
}

#[test]
fn random_arx_systems_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = WindowConfig {
        ridge: 1e-12,
        ..WindowConfig::default()
    };
    let d = cfg.embed_depth;
    for trial in 0..20 {
        let n = 1 + trial % d;
        let sys = ArxSystem::random(&mut rng, n, d);
        let total = cfg.s_learn + 10;
        let inputs = random_inputs(&mut rng, total);
        let y0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = sys.simulate(&y0, &inputs, total);
        let stacks = FeedbackStacks {
            voltage: y[..cfg.s_learn].to_vec(),
            inputs: inputs[..cfg.s_learn].to_vec(),
        };
        let model = fit_koopman(&stacks, &cfg).unwrap();
        let pred = predict_horizon(
            &model,
            &y[cfg.s_learn - d..cfg.s_learn],
            &inputs[cfg.s_learn - 1..],
            10,
        )
        .unwrap();
        let err = rmse(&pred, &y[cfg.s_learn..]);
        assert!(err < 1e-6, "trial {trial} (order {n}): rmse {err:e}");
    }
}

#[test]
fn fitted_model_shape_and_selector() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = WindowConfig::default();
    let inputs = random_inputs(&mut rng, cfg.s_learn);
    let voltage: Vec<f64> = (0..cfg.s_learn).map(|_| rng.random_range(3.5..4.0)).collect();
    let m = fit_koopman(&FeedbackStacks { voltage, inputs }, &cfg).unwrap();
    assert_eq!(m.a_mat.shape(), (5, 5));
    assert_eq!(m.b_mat.shape(), (5, 2));
    assert_eq!(m.c_row.iter().filter(|&&c| c != 0.0).count(), 1);
    assert_eq!(m.c_row[4], 1.0);
}

#[test]
fn short_stacks_are_rejected() {
    let cfg = WindowConfig::default();
    let short = FeedbackStacks {
        voltage: vec![3.7; 10],
        inputs: vec![[5.0, 0.4]; 10],
    };
    assert!(fit_koopman(&short, &cfg).is_err());
    let misaligned = FeedbackStacks {
        voltage: vec![3.7; 40],
        inputs: vec![[5.0, 0.4]; 39],
    };
    assert!(fit_koopman(&misaligned, &cfg).is_err());
}

#[test]
fn streaming_predictions_match_batch_rollouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = WindowConfig::default();
    let n = 200;
    let inputs = random_inputs(&mut rng, n);
    let voltage: Vec<f64> = (0..n)
        .map(|k| 3.7 + 0.001 * k as f64 + 0.01 * (k as f64 * 0.3).sin())
        .collect();
    let mut sk = SlidingKoopman::new(cfg).unwrap();
    let mut streamed = vec![None; n];
    let mut fits = Vec::new();
    for k in 0..n {
        streamed[k] = sk.predict_next();
        if sk.push(voltage[k], inputs[k]).unwrap() {
            fits.push(k);
        }
    }
    let expected_fits: Vec<usize> = (0..)
        .map(|c| cfg.s_learn - 1 + c * cfg.slide())
        .take_while(|&k| k < n)
        .collect();
    assert_eq!(fits, expected_fits);
    assert!(streamed[..cfg.s_learn].iter().all(Option::is_none));
    assert!(streamed[cfg.s_learn..].iter().all(Option::is_some));

    for &f in &fits {
        let start = f + 1 - cfg.s_learn;
        let stacks = FeedbackStacks {
            voltage: voltage[start..=f].to_vec(),
            inputs: inputs[start..=f].to_vec(),
        };
        let model = fit_koopman(&stacks, &cfg).unwrap();
        let horizon = cfg.slide().min(n - 1 - f);
        let pred = predict_horizon(
            &model,
            &voltage[f + 1 - cfg.embed_depth..=f],
            &inputs[f..],
            horizon,
        )
        .unwrap();
        for (i, p) in pred.iter().enumerate() {
            assert_abs_diff_eq!(streamed[f + 1 + i].unwrap(), *p, epsilon = 1e-12);
        }
    }
}

#[test]
fn feedback_splice() {
    let meas: Vec<f64> = (0..10).map(|k| k as f64).collect();
    let est: Vec<f64> = (0..10).map(|k| 100.0 + k as f64).collect();
    assert_eq!(select_feedback(false, &meas, &est, Some(3)).unwrap(), meas);
    let spliced = select_feedback(true, &meas, &est, Some(4)).unwrap();
    for (k, v) in spliced.iter().enumerate() {
        assert_eq!(*v, if k < 4 { meas[k] } else { est[k] });
    }
    assert_eq!(select_feedback(true, &meas, &est, None).unwrap(), est);
    assert!(select_feedback(true, &meas, &est[..9], None).is_err());
}

#[test]
fn non_finite_samples_are_rejected() {
    let mut sk = SlidingKoopman::new(WindowConfig::default()).unwrap();
    assert!(sk.push(f64::NAN, [5.0, 0.4]).is_err());
    assert!(sk.push(3.7, [f64::INFINITY, 0.4]).is_err());
}

proptest! {
    #[test]
    fn window_advances_linearly(n in 0usize..1000, start in 0usize..1000) {
        let cfg = WindowConfig::default();
        let mut w = start;
        for _ in 0..n {
            w = advance_window(w, &cfg);
        }
        prop_assert_eq!(w, start + n * cfg.slide());
    }

    #[test]
    fn coulomb_count_is_exact_single_step(
        soc in 0.0f64..=1.0,
        current in -10.0f64..10.0,
        dt in 0.01f64..10.0,
    ) {
        let next = coulomb_count(soc, current, dt, 7.0);
        let raw = soc + dt * current / (3600.0 * 7.0);
        prop_assert_eq!(next, raw.clamp(0.0, 1.0));
    }
}
