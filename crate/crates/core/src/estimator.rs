//! Streaming secure estimator: the per-sample dispatch between nominal
//! Koopman prediction and error-compensated self-learning.
//!
//! While the attack flag is down the sliding-window learner is fed the
//! measurements and its predictions are reported as `v_pred`. When the flag
//! rises, `E1` is frozen from the last complete nominal prediction window
//! and the learner is fed its own compensated output instead:
//!
//! | kind        | fed back            | reported estimate   |
//! |-------------|---------------------|---------------------|
//! | Stage I     | `V_p + E1`          | `V_p + E1`          |
//! | empirical   | `V_p + E2`          | `V_p + E2`          |
//! | GPR         | `V_p + E1`          | `V_p + E2`          |
//!
//! Measurements taken while the flag is up are never read.

use std::sync::Arc;

use crate::battery::OcvCurve;
use crate::correction::{
    ocv_differences, secure_estimate_step, stage1_error, CorrectionState, CorrectorMode,
    RegionTable, StepInputs,
};
use crate::error::{Error, Result};
use crate::gpr::GprBank;
use crate::koopman::{coulomb_count, SlidingKoopman, WindowConfig};

#[derive(Debug, Clone)]
pub enum EstimatorKind {
    /// Self-learning with Stage I compensation only.
    StageIOnly,
    Empirical,
    Gpr(Arc<GprBank>),
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::StageIOnly => "stage1_only",
            EstimatorKind::Empirical => "secure_empirical",
            EstimatorKind::Gpr(_) => "secure_gpr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub soc_cc: f64,
    pub region: usize,
    pub v_pred: Option<f64>,
    /// Stage I error in use; present only under attack.
    pub e1: Option<f64>,
    /// Secure estimate; present only under attack.
    pub v_hat: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SecureEstimator {
    koopman: SlidingKoopman,
    kind: EstimatorKind,
    table: RegionTable,
    curve: Option<OcvCurve>,
    capacity: f64,
    dt: f64,
    soc_cc: f64,
    prev_current: f64,
    ctx: CorrectionState,
    attacked: bool,
    cycle_residuals: Vec<f64>,
    last_full_window: Option<Vec<f64>>,
    k: usize,
    measurement_reads: Vec<usize>,
    secure_steps: usize,
}

impl SecureEstimator {
    /// `curve` is required for the empirical corrector, which differences
    /// the OCV of the Coulomb-counted SOC.
    pub fn new(
        cfg: WindowConfig,
        kind: EstimatorKind,
        table: RegionTable,
        capacity: f64,
        dt: f64,
        soc0: f64,
        curve: Option<OcvCurve>,
    ) -> Result<Self> {
        if matches!(kind, EstimatorKind::Empirical) && curve.is_none() {
            return Err(Error::config("empirical corrector needs the OCV-SOC map"));
        }
        if !(capacity > 0.0) || !(dt > 0.0) {
            return Err(Error::domain("capacity and dt must be positive"));
        }
        let mode = match kind {
            EstimatorKind::Gpr(_) => CorrectorMode::Gpr,
            _ => CorrectorMode::Empirical,
        };
        let mut ctx = CorrectionState::new(mode);
        ctx.region = table.region(soc0);
        Ok(Self {
            koopman: SlidingKoopman::new(cfg)?,
            kind,
            table,
            curve,
            capacity,
            dt,
            soc_cc: soc0,
            prev_current: 0.0,
            ctx,
            attacked: false,
            cycle_residuals: Vec::new(),
            last_full_window: None,
            k: 0,
            measurement_reads: Vec::new(),
            secure_steps: 0,
        })
    }

    pub fn kind(&self) -> &EstimatorKind {
        &self.kind
    }

    /// Sample indices whose measurement was consumed.
    pub fn measurement_reads(&self) -> &[usize] {
        &self.measurement_reads
    }

    /// Number of samples processed by the secure branch.
    pub fn secure_steps(&self) -> usize {
        self.secure_steps
    }

    pub fn context(&self) -> &CorrectionState {
        &self.ctx
    }

    pub fn koopman(&self) -> &SlidingKoopman {
        &self.koopman
    }

    /// Processes one sample. `current` is the charging current applied from
    /// this sample to the next; `v_meas` is only read when `attack_flag` is
    /// false.
    pub fn step(&mut self, current: f64, v_meas: f64, attack_flag: bool) -> Result<StepOutput> {
        if self.k > 0 {
            self.soc_cc = coulomb_count(self.soc_cc, self.prev_current, self.dt, self.capacity);
        }
        let soc = self.soc_cc;
        let input = [current, soc];
        let v_p = self.koopman.predict_next();
        let ocv = match &self.curve {
            Some(c) => c.eval(soc)?,
            None => 0.0,
        };
        let region = self.table.region(soc);

        let (feedback, out) = if !attack_flag {
            if self.attacked {
                self.attacked = false;
                self.cycle_residuals.clear();
                self.last_full_window = None;
            }
            self.measurement_reads.push(self.k);
            if let Some(p) = v_p {
                self.cycle_residuals.push(v_meas - p);
            }
            let (_, _, ctx) = ocv_differences(&self.ctx, ocv);
            self.ctx = CorrectionState { region, ..ctx };
            let out = StepOutput { soc_cc: soc, region, v_pred: v_p, e1: None, v_hat: None };
            (v_meas, out)
        } else {
            let v_p = v_p.ok_or_else(|| {
                Error::domain("attack flagged before the first Koopman prediction is available")
            })?;
            if !self.attacked {
                let residuals = self
                    .last_full_window
                    .as_deref()
                    .unwrap_or(&self.cycle_residuals);
                self.ctx.e1 = stage1_error(residuals)?;
                self.ctx.region = region;
                self.attacked = true;
            }
            self.secure_steps += 1;
            let inputs = StepInputs { current, soc, ocv };
            let (v_hat, feedback) = match &self.kind {
                EstimatorKind::StageIOnly => {
                    let (_, _, ctx) = ocv_differences(&self.ctx, ocv);
                    self.ctx = CorrectionState { region, ..ctx };
                    let v_bar = v_p + self.ctx.e1;
                    (v_bar, v_bar)
                }
                EstimatorKind::Empirical => {
                    let (v_hat, ctx) =
                        secure_estimate_step(v_p, &self.ctx, inputs, &self.table, None)?;
                    self.ctx = ctx;
                    (v_hat, v_hat)
                }
                EstimatorKind::Gpr(bank) => {
                    let (v_hat, ctx) =
                        secure_estimate_step(v_p, &self.ctx, inputs, &self.table, Some(bank))?;
                    self.ctx = ctx;
                    (v_hat, v_p + self.ctx.e1)
                }
            };
            if !v_hat.is_finite() || v_hat.abs() > 1e3 {
                return Err(Error::numerical(format!("secure estimate diverged ({v_hat})")));
            }
            let out = StepOutput {
                soc_cc: soc,
                region,
                v_pred: Some(v_p),
                e1: Some(self.ctx.e1),
                v_hat: Some(v_hat),
            };
            (feedback, out)
        };

        if self.koopman.push(feedback, input)? {
            let full = self.cycle_residuals.len() == self.koopman.config().slide();
            let window = std::mem::take(&mut self.cycle_residuals);
            if full && !self.attacked {
                self.last_full_window = Some(window);
            }
        }
        self.prev_current = current;
        self.k += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::{run_cccv, BatteryParams};

    fn run(kind: EstimatorKind, onset: f64) -> (Vec<StepOutput>, SecureEstimator) {
        let p = BatteryParams::default();
        let tr = run_cccv(&p, 5.0, 0.35, 1.0, 300.0).unwrap();
        let mut est = SecureEstimator::new(
            WindowConfig::default(),
            kind,
            RegionTable::default(),
            p.capacity,
            tr.dt,
            0.35,
            Some(p.ocv_curve().unwrap()),
        )
        .unwrap();
        let outs = tr
            .rows
            .iter()
            .map(|r| est.step(r.current, r.v_meas, r.t >= onset).unwrap())
            .collect();
        (outs, est)
    }

    #[test]
    fn nominal_branch_has_no_estimate() {
        let (outs, est) = run(EstimatorKind::Empirical, f64::INFINITY);
        assert!(outs.iter().all(|o| o.v_hat.is_none() && o.e1.is_none()));
        assert!(outs[..40].iter().all(|o| o.v_pred.is_none()));
        assert!(outs[40..].iter().all(|o| o.v_pred.is_some()));
        assert_eq!(est.secure_steps(), 0);
    }

    #[test]
    fn never_reads_attacked_measurements() {
        let (outs, est) = run(EstimatorKind::Empirical, 50.0);
        assert!(est.measurement_reads().iter().all(|&k| k < 50));
        assert_eq!(est.measurement_reads().len(), 50);
        assert_eq!(est.secure_steps(), outs.len() - 50);
        assert!(outs[50..].iter().all(|o| o.v_hat.is_some()));
    }

    #[test]
    fn attack_before_first_prediction_fails() {
        let p = BatteryParams::default();
        let mut est = SecureEstimator::new(
            WindowConfig::default(),
            EstimatorKind::StageIOnly,
            RegionTable::default(),
            p.capacity,
            1.0,
            0.35,
            None,
        )
        .unwrap();
        assert!(est.step(5.0, 3.7, true).is_err());
    }

    #[test]
    fn stage1_estimate_is_prediction_plus_e1() {
        let (outs, _) = run(EstimatorKind::StageIOnly, 50.0);
        let e1 = outs[50].e1.unwrap();
        for o in &outs[50..] {
            assert_eq!(o.e1, Some(e1));
            assert_eq!(o.v_hat.unwrap(), o.v_pred.unwrap() + e1);
        }
    }

    #[test]
    fn coulomb_counting_tracks_truth() {
        let p = BatteryParams::default();
        let tr = run_cccv(&p, 5.0, 0.35, 1.0, 300.0).unwrap();
        let (outs, _) = run(EstimatorKind::Empirical, 50.0);
        for (o, r) in outs.iter().zip(&tr.rows) {
            assert!((o.soc_cc - r.soc_true).abs() < 1e-12);
        }
    }
}
