//! Sliding-window Koopman predictor over delay-embedded terminal voltage.
//!
//! The observables are the last `d` voltages (Hankel coordinates). Inside
//! each learning window a linear model
//!
//! ```text
//! z(k+1) = A z(k) + B u(k),   V_p(k) = C z(k),   u(k) = [I(k), SOC(k)]
//! ```
//!
//! is fitted by ridge-regularized least squares, then rolled forward over the
//! prediction window that follows it. `C` selects the most recent delay
//! coordinate.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value cutoff of the least-squares solve.
pub const SVD_CUTOFF: f64 = 1e-10;

/// Koopman input at one sample: charging current and Coulomb-counted SOC.
pub type Input = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Total sliding-window length.
    pub s_total: usize,
    /// Learning-window length.
    pub s_learn: usize,
    /// Delay-embedding depth.
    pub embed_depth: usize,
    pub ridge: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            s_total: 51,
            s_learn: 40,
            embed_depth: 5,
            ridge: 1e-8,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.embed_depth;
        if d == 0 {
            return Err(Error::config("koopman.embed_depth must be at least 1"));
        }
        if self.s_learn >= self.s_total {
            return Err(Error::config("koopman.s_learn must be below koopman.s_total"));
        }
        if self.s_learn < 2 * d + 2 {
            return Err(Error::config(format!(
                "koopman.s_learn = {} leaves fewer than d + 2 = {} snapshot pairs",
                self.s_learn,
                d + 2
            )));
        }
        if self.slide() < 1 {
            return Err(Error::config(
                "koopman.s_total - koopman.s_learn - 1 must be at least 1",
            ));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::config("koopman.ridge must be nonnegative"));
        }
        Ok(())
    }

    /// Amount the window moves after each prediction cycle.
    pub fn slide(&self) -> usize {
        self.s_total.saturating_sub(self.s_learn + 1)
    }

    pub fn horizon(&self) -> usize {
        self.s_total - self.s_learn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub a_mat: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub c_row: RowDVector<f64>,
}

impl KoopmanModel {
    pub fn depth(&self) -> usize {
        self.a_mat.nrows()
    }

    /// Model with `C` selecting the last delay coordinate.
    pub fn with_selector(a_mat: DMatrix<f64>, b_mat: DMatrix<f64>) -> Self {
        let d = a_mat.nrows();
        let mut c_row = RowDVector::zeros(d);
        c_row[d - 1] = 1.0;
        Self { a_mat, b_mat, c_row }
    }

    pub fn step(&self, z: &DVector<f64>, u: Input) -> DVector<f64> {
        &self.a_mat * z + &self.b_mat * DVector::from_column_slice(&u)
    }

    pub fn output(&self, z: &DVector<f64>) -> f64 {
        (&self.c_row * z)[0]
    }
}

/// Data stacks handed to the learner: voltages over the learning window and
/// inputs aligned with them (possibly extending past the voltages).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeedbackStacks {
    pub voltage: Vec<f64>,
    pub inputs: Vec<Input>,
}

/// SOC update from the trusted current channel.
pub fn coulomb_count(soc_prev: f64, current: f64, dt: f64, capacity: f64) -> f64 {
    (soc_prev + dt * current / (3600.0 * capacity)).clamp(0.0, 1.0)
}

/// Paired snapshot matrices of delay-embedded voltages. Column `j` of
/// `z_now` is `[V(j), ..., V(j+d-1)]` and column `j` of `z_next` is the same
/// window shifted one sample ahead.
pub fn build_hankel(voltages: &[f64], embed_depth: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if embed_depth == 0 || voltages.len() < embed_depth + 1 {
        return Err(Error::domain(format!(
            "need at least {} samples for depth {embed_depth}, got {}",
            embed_depth + 1,
            voltages.len()
        )));
    }
    let cols = voltages.len() - embed_depth;
    let z_now = DMatrix::from_fn(embed_depth, cols, |i, j| voltages[j + i]);
    let z_next = DMatrix::from_fn(embed_depth, cols, |i, j| voltages[j + i + 1]);
    Ok((z_now, z_next))
}

/// Solves `min ||Y - W X||^2 + ridge ||W||^2` for `W` through the SVD of
/// `X^T`, discarding singular values below `SVD_CUTOFF` relative to the
/// largest.
pub fn ridge_least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let svd = x.transpose().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::numerical("SVD did not converge")),
    };
    let s = svd.singular_values;
    let s_max = s.iter().copied().fold(0.0, f64::max);
    if !(s_max > 0.0) || !s_max.is_finite() {
        return Err(Error::numerical("regressor matrix is zero or non-finite"));
    }
    let filt = s.map(|si| {
        if si > SVD_CUTOFF * s_max {
            si / (si * si + ridge)
        } else {
            0.0
        }
    });
    // W^T = V diag(f) U^T Y^T
    let uty = u.transpose() * y.transpose();
    let scaled = DMatrix::from_fn(uty.nrows(), uty.ncols(), |i, j| filt[i] * uty[(i, j)]);
    Ok((v_t.transpose() * scaled).transpose())
}

/// Fits `[A B]` on the learning window held in `stacks`.
pub fn fit_koopman(stacks: &FeedbackStacks, cfg: &WindowConfig) -> Result<KoopmanModel> {
    let d = cfg.embed_depth;
    let n = stacks.voltage.len();
    if stacks.inputs.len() < n {
        return Err(Error::domain(format!(
            "input stack ({}) shorter than voltage stack ({n})",
            stacks.inputs.len()
        )));
    }
    let pairs = n.saturating_sub(d);
    if pairs < d + 2 {
        return Err(Error::IllPosed(format!(
            "{pairs} snapshot pairs for {} unknowns per row",
            d + 2
        )));
    }
    let (z_now, z_next) = build_hankel(&stacks.voltage, d)?;
    // Pair j maps z(k) to z(k+1) with k = j + d - 1, the newest sample of z(k).
    let regressors = DMatrix::from_fn(d + 2, pairs, |i, j| {
        if i < d {
            z_now[(i, j)]
        } else {
            stacks.inputs[j + d - 1][i - d]
        }
    });
    let w = ridge_least_squares(&regressors, &z_next, cfg.ridge)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite Koopman matrices"));
    }
    let a_mat = w.columns(0, d).into_owned();
    let b_mat = w.columns(d, 2).into_owned();
    Ok(KoopmanModel::with_selector(a_mat, b_mat))
}

/// Rolls the model forward `horizon` steps from `init_embedding`, applying
/// `inputs[i]` on step `i`, and returns `C z` after each step.
pub fn predict_horizon(
    model: &KoopmanModel,
    init_embedding: &[f64],
    inputs: &[Input],
    horizon: usize,
) -> Result<Vec<f64>> {
    if init_embedding.len() != model.depth() {
        return Err(Error::domain(format!(
            "embedding length {} does not match model depth {}",
            init_embedding.len(),
            model.depth()
        )));
    }
    if inputs.len() < horizon {
        return Err(Error::domain(format!(
            "{} inputs for a horizon of {horizon}",
            inputs.len()
        )));
    }
    let mut z = DVector::from_column_slice(init_embedding);
    Ok(inputs[..horizon]
        .iter()
        .map(|&u| {
            z = model.step(&z, u);
            model.output(&z)
        })
        .collect())
}

pub fn advance_window(window_start: usize, cfg: &WindowConfig) -> usize {
    window_start + cfg.slide()
}

/// Voltage stack for the next learning window.
///
/// Without an attack the stack is the measurements. Under attack, entries
/// from `onset` on come from the secure estimates while earlier, trusted
/// measurements are kept; `onset = None` means the whole window is past the
/// onset.
pub fn select_feedback(
    attack_flag: bool,
    measurements: &[f64],
    secure_estimates: &[f64],
    onset: Option<usize>,
) -> Result<Vec<f64>> {
    if measurements.len() != secure_estimates.len() {
        return Err(Error::domain(format!(
            "misaligned stacks: {} measurements, {} estimates",
            measurements.len(),
            secure_estimates.len()
        )));
    }
    if !attack_flag {
        return Ok(measurements.to_vec());
    }
    let m = onset.unwrap_or(0).min(measurements.len());
    Ok(measurements[..m]
        .iter()
        .chain(&secure_estimates[m..])
        .copied()
        .collect())
}

/// Streaming form of the sliding-window learner.
///
/// Samples are pushed one at a time with the voltage to learn from (a
/// measurement, or the estimator's own output under attack). Whenever a
/// learning window fills, a model is fitted and a rollout starts from the
/// window's last embedding; [`SlidingKoopman::predict_next`] advances that
/// rollout one sample with the input of the previous sample. Because the
/// window slides by `s_total - s_learn - 1`, the next window closes on the
/// sample before the last one predicted, so every sample after the first
/// window receives exactly one prediction, from the newest model.
#[derive(Debug, Clone)]
pub struct SlidingKoopman {
    cfg: WindowConfig,
    voltages: Vec<f64>,
    inputs: Vec<Input>,
    window_start: usize,
    model: Option<KoopmanModel>,
    rollout: Option<DVector<f64>>,
    fits: usize,
}

impl SlidingKoopman {
    pub fn new(cfg: WindowConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            voltages: Vec::new(),
            inputs: Vec::new(),
            window_start: 0,
            model: None,
            rollout: None,
            fits: 0,
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    /// Number of samples pushed so far.
    pub fn len(&self) -> usize {
        self.voltages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltages.is_empty()
    }

    pub fn model(&self) -> Option<&KoopmanModel> {
        self.model.as_ref()
    }

    /// Number of learning windows fitted so far.
    pub fn fits(&self) -> usize {
        self.fits
    }

    /// Learned voltage history (measurements and fed-back estimates).
    pub fn voltages(&self) -> &[f64] {
        &self.voltages
    }

    /// Prediction for the next sample, or `None` before the first window
    /// has been fitted.
    pub fn predict_next(&mut self) -> Option<f64> {
        let model = self.model.as_ref()?;
        let z = self.rollout.as_mut()?;
        let u = *self.inputs.last()?;
        *z = model.step(z, u);
        Some(model.output(z))
    }

    /// Appends a sample. Returns `true` when it closed a learning window and
    /// a new model was fitted.
    pub fn push(&mut self, voltage: f64, input: Input) -> Result<bool> {
        if !voltage.is_finite() || input.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite sample at index {}",
                self.voltages.len()
            )));
        }
        self.voltages.push(voltage);
        self.inputs.push(input);
        let end = self.window_start + self.cfg.s_learn;
        if self.voltages.len() < end {
            return Ok(false);
        }
        let stacks = FeedbackStacks {
            voltage: self.voltages[self.window_start..end].to_vec(),
            inputs: self.inputs[self.window_start..end].to_vec(),
        };
        let model = fit_koopman(&stacks, &self.cfg)?;
        let d = self.cfg.embed_depth;
        self.rollout = Some(DVector::from_column_slice(&self.voltages[end - d..end]));
        self.model = Some(model);
        self.window_start = advance_window(self.window_start, &self.cfg);
        self.fits += 1;
        Ok(true)
    }
}
