//! Two-stage compensation of the self-learned Koopman prediction.
//!
//! Stage I estimates the Koopman approximation error `E1` from the last
//! nominal prediction residuals. Stage II produces the full compensation
//! `E2` either from the OCV-SOC map (empirical corrector) or from per-region
//! Gaussian-process models, and the secure estimate is `V_p + E2`.
//!
//! The empirical corrector splits the SOC axis into six regions. Inside
//! region `j`
//!
//! ```text
//! E2 = l1(SOC) E1 + l2(SOC) dOCV + l3(SOC) d2OCV
//! ```
//!
//! and on entering region `j` from `j - 1` the Stage I error is carried over
//! as
//!
//! ```text
//! E1 <- m1(SOC) E1 + m2(SOC) dOCV + m3(SOC) d2OCV
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::GprBank;

/// Lower bounds of regions 2 to 6.
pub const REGION_BOUNDARIES: [f64; 5] = [0.4, 0.66, 0.73, 0.75, 0.86];

pub const REGION_COUNT: usize = 6;

/// SOC-dependent coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SocFn {
    Zero,
    One,
    Soc,
    OneMinusSoc,
    SocMinusOne,
}

impl SocFn {
    pub fn eval(self, soc: f64) -> f64 {
        match self {
            SocFn::Zero => 0.0,
            SocFn::One => 1.0,
            SocFn::Soc => soc,
            SocFn::OneMinusSoc => 1.0 - soc,
            SocFn::SocMinusOne => soc - 1.0,
        }
    }
}

/// Coefficient triples of the empirical corrector.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTable {
    pub boundaries: [f64; 5],
    /// `l_funcs[j - 1]` applies inside region `j`.
    pub l_funcs: [[SocFn; 3]; 6],
    /// `m_funcs[j - 2]` applies on the switch `j - 1 -> j`.
    pub m_funcs: [[SocFn; 3]; 5],
}

impl Default for RegionTable {
    fn default() -> Self {
        use SocFn::*;
        Self {
            boundaries: REGION_BOUNDARIES,
            l_funcs: [
                [OneMinusSoc, Zero, Zero],
                [Soc, OneMinusSoc, Soc],
                [OneMinusSoc, OneMinusSoc, Soc],
                [Soc, OneMinusSoc, Soc],
                [OneMinusSoc, OneMinusSoc, Soc],
                [Soc, OneMinusSoc, Soc],
            ],
            m_funcs: [
                [Soc, Soc, Soc],
                [One, OneMinusSoc, Soc],
                [SocMinusOne, OneMinusSoc, Soc],
                [One, Zero, Zero],
                [OneMinusSoc, Soc, Soc],
            ],
        }
    }
}

impl RegionTable {
    /// Region index `1..=6`; intervals are closed below, and SOC 1 belongs
    /// to region 6.
    pub fn region(&self, soc: f64) -> usize {
        1 + self.boundaries.iter().filter(|&&b| soc >= b).count()
    }
}

pub fn soc_region(soc: f64) -> usize {
    RegionTable::default().region(soc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorMode {
    #[default]
    Empirical,
    Gpr,
}

impl std::str::FromStr for CorrectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(Self::Empirical),
            "gpr" => Ok(Self::Gpr),
            other => Err(Error::config(format!(
                "unknown corrector `{other}` (expected empirical or gpr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionState {
    pub e1: f64,
    pub region: usize,
    pub ocv_prev: Option<f64>,
    pub docv_prev: Option<f64>,
    pub mode: CorrectorMode,
}

impl CorrectionState {
    pub fn new(mode: CorrectorMode) -> Self {
        Self {
            e1: 0.0,
            region: 1,
            ocv_prev: None,
            docv_prev: None,
            mode,
        }
    }
}

/// First and second differences of the OCV sequence. The first sample
/// yields zero for both, the second a zero second difference.
pub fn ocv_differences(state: &CorrectionState, ocv_now: f64) -> (f64, f64, CorrectionState) {
    let docv = state.ocv_prev.map_or(0.0, |prev| ocv_now - prev);
    let d2ocv = state.docv_prev.map_or(0.0, |prev| docv - prev);
    let next = CorrectionState {
        ocv_prev: Some(ocv_now),
        docv_prev: state.ocv_prev.map(|_| docv),
        ..*state
    };
    (docv, d2ocv, next)
}

/// Mean of the nominal prediction residuals `V - V_p`.
pub fn stage1_error(nominal_residuals: &[f64]) -> Result<f64> {
    if nominal_residuals.is_empty() {
        return Err(Error::domain("no nominal residuals to estimate E1 from"));
    }
    Ok(nominal_residuals.iter().sum::<f64>() / nominal_residuals.len() as f64)
}

pub fn empirical_e2(e1: f64, soc: f64, docv: f64, d2ocv: f64, table: &RegionTable) -> f64 {
    let [l1, l2, l3] = table.l_funcs[table.region(soc) - 1];
    l1.eval(soc) * e1 + l2.eval(soc) * docv + l3.eval(soc) * d2ocv
}

/// Carries the Stage I error across the switch `j_prev -> j_new`.
pub fn region_switch_update(
    e1_prev: f64,
    soc: f64,
    docv: f64,
    d2ocv: f64,
    j_prev: usize,
    j_new: usize,
    table: &RegionTable,
) -> Result<f64> {
    if !(1..REGION_COUNT).contains(&j_prev) || j_new != j_prev + 1 {
        return Err(Error::domain(format!(
            "unsupported region switch {j_prev} -> {j_new}; only forward switches between \
             adjacent regions are defined"
        )));
    }
    let [m1, m2, m3] = table.m_funcs[j_new - 2];
    Ok(m1.eval(soc) * e1_prev + m2.eval(soc) * docv + m3.eval(soc) * d2ocv)
}

/// Per-sample inputs of the secure estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInputs {
    pub current: f64,
    /// Coulomb-counted SOC.
    pub soc: f64,
    /// OCV at the Coulomb-counted SOC.
    pub ocv: f64,
}

/// One step of the secure estimator after the Koopman prediction `v_p` is
/// available. Returns the secure estimate and the updated context.
///
/// In empirical mode the region index is advanced first (updating `E1`
/// through the switch rule), then `E2` is evaluated. In GPR mode `E1` stays
/// fixed and `E2 = E1 - y_hat`, with `y_hat` the predicted residual of the
/// Stage-I-corrected prediction.
pub fn secure_estimate_step(
    v_p: f64,
    ctx: &CorrectionState,
    inputs: StepInputs,
    table: &RegionTable,
    gpr_bank: Option<&GprBank>,
) -> Result<(f64, CorrectionState)> {
    let (docv, d2ocv, mut next) = ocv_differences(ctx, inputs.ocv);
    let region = table.region(inputs.soc);
    if region < ctx.region {
        return Err(Error::domain(format!(
            "SOC region moved backwards ({} -> {region}); discharge is not supported",
            ctx.region
        )));
    }
    let e2 = match ctx.mode {
        CorrectorMode::Empirical => {
            let mut e1 = ctx.e1;
            for j in ctx.region..region {
                e1 = region_switch_update(e1, inputs.soc, docv, d2ocv, j, j + 1, table)?;
            }
            next.e1 = e1;
            empirical_e2(e1, inputs.soc, docv, d2ocv, table)
        }
        CorrectorMode::Gpr => {
            let bank = gpr_bank.ok_or_else(|| {
                Error::config("GPR corrector selected but no model bank was loaded")
            })?;
            let v_bar = v_p + ctx.e1;
            bank.e2([inputs.current, inputs.soc, v_bar, ctx.e1], region)?
        }
    };
    next.region = region;
    Ok((v_p + e2, next))
}
