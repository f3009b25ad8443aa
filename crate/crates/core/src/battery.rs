//! Second-order equivalent-circuit model of a lithium-ion cell and a CCCV
//! charger that drives it.
//!
//! The plant state is the state of charge plus the voltages across the two
//! RC branches. Each RC branch is discretized with an exact zero-order hold,
//! so traces do not depend on the step size beyond the input sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{TimeSeriesTrace, TraceRow};

/// Default OCV anchors: steep below 40 % SOC, flatter through the middle and
/// steeper again toward full charge. Knots sit on the correction-region
/// boundaries so the region structure is visible in the curve.
pub const DEFAULT_OCV_TABLE: [(f64, f64); 13] = [
    (0.00, 3.300),
    (0.05, 3.450),
    (0.10, 3.530),
    (0.20, 3.610),
    (0.30, 3.660),
    (0.40, 3.700),
    (0.50, 3.735),
    (0.66, 3.810),
    (0.73, 3.860),
    (0.75, 3.876),
    (0.86, 3.980),
    (0.95, 4.090),
    (1.00, 4.180),
];

/// Monotone piecewise-cubic Hermite interpolant of the OCV-SOC map.
///
/// Knot slopes use the weighted harmonic mean of neighbouring secants with
/// the three-point end rule (the PCHIP construction), which keeps the curve
/// monotone and free of overshoot between anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct OcvCurve {
    soc: Vec<f64>,
    ocv: Vec<f64>,
    slopes: Vec<f64>,
}

impl OcvCurve {
    pub fn new(table: &[(f64, f64)]) -> Result<Self> {
        if table.len() < 2 {
            return Err(Error::domain("OCV table needs at least two anchors"));
        }
        let soc: Vec<f64> = table.iter().map(|p| p.0).collect();
        let ocv: Vec<f64> = table.iter().map(|p| p.1).collect();
        if soc[0] != 0.0 || soc[soc.len() - 1] != 1.0 {
            return Err(Error::domain("OCV table must span SOC 0 to 1"));
        }
        for w in table.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::domain(format!(
                    "OCV table SOC values not strictly increasing at {}",
                    w[1].0
                )));
            }
            if !(w[1].1 > w[0].1) {
                return Err(Error::domain(format!(
                    "OCV table voltages not strictly increasing at SOC {}",
                    w[1].0
                )));
            }
        }
        let slopes = pchip_slopes(&soc, &ocv);
        Ok(Self { soc, ocv, slopes })
    }

    pub fn eval(&self, soc: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&soc) {
            return Err(Error::domain(format!("SOC {soc} outside [0, 1]")));
        }
        // Index of the segment [soc[i], soc[i+1]] containing the query.
        let i = match self.soc.partition_point(|&s| s <= soc) {
            0 => 0,
            p => (p - 1).min(self.soc.len() - 2),
        };
        let h = self.soc[i + 1] - self.soc[i];
        let t = (soc - self.soc[i]) / h;
        if t == 0.0 {
            return Ok(self.ocv[i]);
        }
        if t == 1.0 {
            return Ok(self.ocv[i + 1]);
        }
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        Ok(h00 * self.ocv[i]
            + h10 * h * self.slopes[i]
            + h01 * self.ocv[i + 1]
            + h11 * h * self.slopes[i + 1])
    }

    pub fn anchors(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.soc.iter().copied().zip(self.ocv.iter().copied())
    }

    /// OCV range covered between two SOC values.
    pub fn span(&self, soc_lo: f64, soc_hi: f64) -> Result<f64> {
        Ok(self.eval(soc_hi)? - self.eval(soc_lo)?)
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0], delta[0]];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    d[0] = pchip_end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = pchip_end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn pchip_end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

/// Which resistances an aging factor scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgingScope {
    /// Only the series resistance.
    #[default]
    Series,
    /// Series resistance and both RC-branch resistances.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatteryParams {
    /// Ampere-hours.
    pub capacity: f64,
    pub r0: f64,
    pub r1: f64,
    pub c1: f64,
    pub r2: f64,
    pub c2: f64,
    /// (SOC, OCV) anchors.
    pub ocv_table: Vec<(f64, f64)>,
    /// CV-phase voltage ceiling.
    pub v_max: f64,
    /// CV-phase termination current.
    pub i_cutoff: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            capacity: 7.0,
            r0: 0.010,
            r1: 0.015,
            c1: 2000.0,
            r2: 0.025,
            c2: 20000.0,
            ocv_table: DEFAULT_OCV_TABLE.to_vec(),
            v_max: 4.2,
            i_cutoff: 0.25,
        }
    }
}

impl BatteryParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("capacity", self.capacity),
            ("r0", self.r0),
            ("r1", self.r1),
            ("c1", self.c1),
            ("r2", self.r2),
            ("c2", self.c2),
            ("v_max", self.v_max),
            ("i_cutoff", self.i_cutoff),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        OcvCurve::new(&self.ocv_table)?;
        Ok(())
    }

    pub fn ocv_curve(&self) -> Result<OcvCurve> {
        OcvCurve::new(&self.ocv_table)
    }
}

/// Monotone interpolation of the OCV table at `soc`.
pub fn ocv_lookup(params: &BatteryParams, soc: f64) -> Result<f64> {
    params.ocv_curve()?.eval(soc)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatteryState {
    pub soc: f64,
    pub v_rc1: f64,
    pub v_rc2: f64,
}

impl BatteryState {
    pub fn at_rest(soc: f64) -> Self {
        Self {
            soc,
            v_rc1: 0.0,
            v_rc2: 0.0,
        }
    }
}

/// One RC branch under zero-order-hold current.
fn rc_step(v: f64, r: f64, c: f64, current: f64, dt: f64) -> f64 {
    let decay = (-dt / (r * c)).exp();
    v * decay + r * (1.0 - decay) * current
}

/// Advances the plant by `dt` seconds with `current` held constant
/// (positive = charging).
pub fn step_ecm(
    state: BatteryState,
    current: f64,
    params: &BatteryParams,
    dt: f64,
) -> Result<BatteryState> {
    if !(dt > 0.0) {
        return Err(Error::domain(format!("time step must be positive, got {dt}")));
    }
    let soc = (state.soc + dt * current / (3600.0 * params.capacity)).clamp(0.0, 1.0);
    Ok(BatteryState {
        soc,
        v_rc1: rc_step(state.v_rc1, params.r1, params.c1, current, dt),
        v_rc2: rc_step(state.v_rc2, params.r2, params.c2, current, dt),
    })
}

pub fn terminal_voltage(state: &BatteryState, current: f64, params: &BatteryParams) -> Result<f64> {
    Ok(ocv_lookup(params, state.soc)? + state.v_rc1 + state.v_rc2 + params.r0 * current)
}

/// Copy of `params` with resistances scaled by `aging_factor`.
pub fn age_params(
    params: &BatteryParams,
    aging_factor: f64,
    scope: AgingScope,
) -> Result<BatteryParams> {
    if !(aging_factor >= 1.0) {
        return Err(Error::domain(format!(
            "aging factor must be >= 1, got {aging_factor}"
        )));
    }
    let mut aged = params.clone();
    aged.r0 *= aging_factor;
    if scope == AgingScope::All {
        aged.r1 *= aging_factor;
        aged.r2 *= aging_factor;
    }
    Ok(aged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChargePhase {
    ConstantCurrent,
    ConstantVoltage,
    Done,
}

/// Step-by-step CCCV controller.
///
/// The controller regulates a feedback voltage that may differ from the true
/// terminal voltage by `feedback_offset`; with zero offset it pins the true
/// terminal voltage at `v_max` during the CV phase.
#[derive(Debug, Clone)]
pub struct CccvCharger {
    i_cc: f64,
    phase: ChargePhase,
}

impl CccvCharger {
    pub fn new(i_cc: f64) -> Result<Self> {
        if !(i_cc > 0.0) {
            return Err(Error::domain(format!("CC current must be positive, got {i_cc}")));
        }
        Ok(Self {
            i_cc,
            phase: ChargePhase::ConstantCurrent,
        })
    }

    pub fn phase(&self) -> ChargePhase {
        self.phase
    }

    /// Current to apply over the next step, or `None` once charging has
    /// terminated.
    pub fn command(
        &mut self,
        state: &BatteryState,
        params: &BatteryParams,
        curve: &OcvCurve,
        feedback_offset: f64,
    ) -> Result<Option<f64>> {
        if self.phase == ChargePhase::Done {
            return Ok(None);
        }
        if state.soc >= 1.0 {
            self.phase = ChargePhase::Done;
            return Ok(None);
        }
        // Terminal voltage is affine in the applied current given the state.
        let rest = curve.eval(state.soc)? + state.v_rc1 + state.v_rc2 + feedback_offset;
        if self.phase == ChargePhase::ConstantCurrent {
            if rest + params.r0 * self.i_cc < params.v_max {
                return Ok(Some(self.i_cc));
            }
            self.phase = ChargePhase::ConstantVoltage;
        }
        let current = ((params.v_max - rest) / params.r0).min(self.i_cc);
        if current < params.i_cutoff {
            self.phase = ChargePhase::Done;
            return Ok(None);
        }
        Ok(Some(current))
    }
}

/// Simulates CCCV charging from rest at `soc0` and returns the nominal trace
/// (`v_meas` equal to `v_true`).
///
/// Rows are emitted at `t = k * dt` for `t <= t_end`. When the charger
/// terminates (cutoff current or full cell) a final rest row with zero
/// current closes the trace.
pub fn run_cccv(
    params: &BatteryParams,
    i_cc: f64,
    soc0: f64,
    dt: f64,
    t_end: f64,
) -> Result<TimeSeriesTrace> {
    params.validate()?;
    if !(0.0..=1.0).contains(&soc0) {
        return Err(Error::domain(format!("initial SOC {soc0} outside [0, 1]")));
    }
    if !(dt > 0.0) {
        return Err(Error::domain(format!("time step must be positive, got {dt}")));
    }
    let curve = params.ocv_curve()?;
    let mut charger = CccvCharger::new(i_cc)?;
    let mut state = BatteryState::at_rest(soc0);
    let n_steps = (t_end / dt + 1e-9).floor() as usize;
    let mut rows = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let t = k as f64 * dt;
        let current = charger.command(&state, params, &curve, 0.0)?.unwrap_or(0.0);
        let v = curve.eval(state.soc)? + state.v_rc1 + state.v_rc2 + params.r0 * current;
        rows.push(TraceRow {
            t,
            current,
            soc_true: state.soc,
            v_true: v,
            v_meas: v,
        });
        if charger.phase() == ChargePhase::Done {
            break;
        }
        state = step_ecm(state, current, params, dt)?;
    }
    Ok(TimeSeriesTrace { dt, rows })
}
