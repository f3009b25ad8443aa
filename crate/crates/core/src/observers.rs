//! Model-based baselines: an open-loop ECM simulation driven only by the
//! measured current, and a closed-loop observer that corrects the ECM state
//! with the (possibly corrupted) voltage measurement.

use crate::battery::{step_ecm, BatteryParams, BatteryState};
use crate::error::{Error, Result};

/// Gain on `(soc, v_rc1, v_rc2)` per volt of innovation.
pub const DEFAULT_OBSERVER_GAIN: [f64; 3] = [0.1, 0.05, 0.05];

/// Innovation magnitude beyond which the closed-loop observer is declared
/// divergent.
const DIVERGENCE_LIMIT: f64 = 10.0;

fn validate_inputs(currents: &[f64], dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::domain(format!("time step must be positive, got {dt}")));
    }
    if let Some(i) = currents.iter().position(|c| !c.is_finite()) {
        return Err(Error::domain(format!("non-finite current at sample {i}")));
    }
    Ok(())
}

/// Terminal voltage of the model plant simulated from `init` with the given
/// current sequence; element `k` uses `currents[k]` and the state after `k`
/// steps.
pub fn open_loop_observe(
    params: &BatteryParams,
    currents: &[f64],
    dt: f64,
    init: BatteryState,
) -> Result<Vec<f64>> {
    params.validate()?;
    validate_inputs(currents, dt)?;
    let curve = params.ocv_curve()?;
    let mut x = init;
    let mut out = Vec::with_capacity(currents.len());
    for &i in currents {
        out.push(curve.eval(x.soc)? + x.v_rc1 + x.v_rc2 + params.r0 * i);
        x = step_ecm(x, i, params, dt)?;
    }
    Ok(out)
}

/// Luenberger-style observer on the ECM state. Returns the a-priori output
/// estimate at every sample, computed before the measurement of that sample
/// is used for correction.
pub fn closed_loop_observe(
    params: &BatteryParams,
    currents: &[f64],
    v_meas: &[f64],
    dt: f64,
    gain: [f64; 3],
    init: BatteryState,
) -> Result<Vec<f64>> {
    params.validate()?;
    validate_inputs(currents, dt)?;
    if currents.len() != v_meas.len() {
        return Err(Error::domain(format!(
            "{} currents but {} measurements",
            currents.len(),
            v_meas.len()
        )));
    }
    if gain.iter().any(|g| !g.is_finite() || *g < 0.0) || gain[0] > 1.0 {
        return Err(Error::config(format!(
            "observer gain {gain:?} must be non-negative with SOC gain at most 1"
        )));
    }
    let curve = params.ocv_curve()?;
    let mut x = init;
    let mut out = Vec::with_capacity(currents.len());
    for (k, (&i, &y)) in currents.iter().zip(v_meas).enumerate() {
        let y_hat = curve.eval(x.soc)? + x.v_rc1 + x.v_rc2 + params.r0 * i;
        out.push(y_hat);
        let innovation = y - y_hat;
        if !innovation.is_finite() || innovation.abs() > DIVERGENCE_LIMIT {
            return Err(Error::numerical(format!(
                "closed-loop observer diverged at sample {k} (innovation {innovation})"
            )));
        }
        let corrected = BatteryState {
            soc: (x.soc + gain[0] * innovation).clamp(0.0, 1.0),
            v_rc1: x.v_rc1 + gain[1] * innovation,
            v_rc2: x.v_rc2 + gain[2] * innovation,
        };
        x = step_ecm(corrected, i, params, dt)?;
    }
    Ok(out)
}
