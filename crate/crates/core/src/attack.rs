//! Additive sensor attacks on the terminal-voltage channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::TimeSeriesTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    /// Denial of service: the receiver keeps the last value delivered before
    /// the attack.
    DosHold,
    /// Constant additive bias.
    FdiBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub t_start: f64,
    /// Exclusive end of the attack; `None` keeps it active to the end of the
    /// trace.
    pub t_end: Option<f64>,
    /// Volts, for `FdiBias`.
    pub bias: f64,
    /// Lag between attack start and the detector raising its flag.
    pub detection_delay: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            t_start: 0.0,
            t_end: None,
            bias: 0.0,
            detection_delay: 0.0,
        }
    }

    pub fn dos(t_start: f64) -> Self {
        Self {
            kind: AttackKind::DosHold,
            t_start,
            ..Self::none()
        }
    }

    pub fn fdi(t_start: f64, t_end: f64, bias: f64) -> Self {
        Self {
            kind: AttackKind::FdiBias,
            t_start,
            t_end: Some(t_end),
            bias,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(end) = self.t_end {
            if self.kind != AttackKind::None && !(self.t_start < end) {
                return Err(Error::domain(format!(
                    "attack interval [{}, {end}) is empty",
                    self.t_start
                )));
            }
        }
        if !(self.detection_delay >= 0.0) {
            return Err(Error::domain("detection delay must be nonnegative"));
        }
        if !self.bias.is_finite() || !self.t_start.is_finite() {
            return Err(Error::domain("attack parameters must be finite"));
        }
        Ok(())
    }

    /// Whether `t` lies inside the half-open attack interval.
    pub fn covers(&self, t: f64) -> bool {
        self.kind != AttackKind::None
            && t >= self.t_start
            && self.t_end.is_none_or(|end| t < end)
    }
}

/// Attack-active flag as seen by the estimator: true on `[t_start, t_end)`.
pub fn attack_active(t: f64, spec: &AttackSpec) -> bool {
    spec.covers(t)
}

/// Flag raised by an ideal detector that needs `detection_delay` seconds to
/// react. Equal to [`attack_active`] for zero delay.
pub fn detector_flag(t: f64, spec: &AttackSpec) -> bool {
    spec.covers(t) && t >= spec.t_start + spec.detection_delay
}

/// Streaming form of the attack channel: corrupts one measurement at a time.
#[derive(Debug, Clone)]
pub struct AttackChannel {
    spec: AttackSpec,
    last_delivered: Option<f64>,
}

impl AttackChannel {
    pub fn new(spec: AttackSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            last_delivered: None,
        })
    }

    /// Measurement delivered at time `t` for a sensor reading `v`.
    ///
    /// A DoS attack that begins on the very first sample holds that sample.
    pub fn deliver(&mut self, t: f64, v: f64) -> f64 {
        if !self.spec.covers(t) {
            self.last_delivered = Some(v);
            return v;
        }
        match self.spec.kind {
            AttackKind::None => {
                self.last_delivered = Some(v);
                v
            }
            AttackKind::DosHold => *self.last_delivered.get_or_insert(v),
            AttackKind::FdiBias => v + self.spec.bias,
        }
    }
}

/// Returns a copy of `trace` with the measurement column corrupted on the
/// attack interval. `v_true` is never modified.
pub fn apply_attack(trace: &TimeSeriesTrace, spec: &AttackSpec) -> Result<TimeSeriesTrace> {
    let first = trace
        .rows
        .first()
        .ok_or_else(|| Error::domain("cannot attack an empty trace"))?;
    if spec.kind != AttackKind::None && spec.t_start < first.t {
        return Err(Error::domain(format!(
            "attack starts at {} s, before the trace start {} s",
            spec.t_start, first.t
        )));
    }
    let mut channel = AttackChannel::new(*spec)?;
    let mut out = trace.clone();
    for r in &mut out.rows {
        r.v_meas = channel.deliver(r.t, r.v_meas);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::{run_cccv, BatteryParams};

    fn trace() -> TimeSeriesTrace {
        run_cccv(&BatteryParams::default(), 5.0, 0.35, 1.0, 900.0).unwrap()
    }

    #[test]
    fn no_attack_is_identity() {
        let tr = trace();
        let out = apply_attack(&tr, &AttackSpec::none()).unwrap();
        assert!(out.rows.iter().all(|r| r.v_meas == r.v_true));
        assert!(!attack_active(100.0, &AttackSpec::none()));
    }

    #[test]
    fn dos_holds_last_pre_attack_value() {
        let tr = trace();
        let out = apply_attack(&tr, &AttackSpec::dos(50.0)).unwrap();
        let held = tr.rows[49].v_true;
        for r in &out.rows {
            if r.t >= 50.0 {
                assert_eq!(r.v_meas, held);
            } else {
                assert_eq!(r.v_meas, r.v_true);
            }
        }
        assert_eq!(
            out.rows.iter().map(|r| r.v_true).collect::<Vec<_>>(),
            tr.v_true()
        );
    }

    #[test]
    fn fdi_bias_on_interval_only() {
        let tr = trace();
        let out = apply_attack(&tr, &AttackSpec::fdi(80.0, 800.0, -0.06)).unwrap();
        for r in &out.rows {
            let d = r.v_meas - r.v_true;
            if (80.0..800.0).contains(&r.t) {
                assert!((d + 0.06).abs() < 1e-12);
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn boundary_semantics() {
        let dos = AttackSpec::dos(50.0);
        assert!(!attack_active(49.9, &dos));
        assert!(attack_active(50.0, &dos));
        assert!(attack_active(1e6, &dos));
        let fdi = AttackSpec::fdi(80.0, 800.0, -0.06);
        assert!(attack_active(799.0, &fdi));
        assert!(!attack_active(800.0, &fdi));
    }

    #[test]
    fn detection_delay_postpones_flag() {
        let mut dos = AttackSpec::dos(50.0);
        dos.detection_delay = 3.0;
        assert!(!detector_flag(52.0, &dos));
        assert!(detector_flag(53.0, &dos));
        assert!(attack_active(52.0, &dos));
    }

    #[test]
    fn idempotence_and_double_bias() {
        let tr = trace();
        let dos = AttackSpec::dos(50.0);
        let once = apply_attack(&tr, &dos).unwrap();
        assert_eq!(apply_attack(&once, &dos).unwrap(), once);
        let fdi = AttackSpec::fdi(80.0, 800.0, -0.06);
        let twice = apply_attack(&apply_attack(&tr, &fdi).unwrap(), &fdi).unwrap();
        for r in twice.rows.iter().filter(|r| (80.0..800.0).contains(&r.t)) {
            assert!((r.v_meas - r.v_true + 0.12).abs() < 1e-12);
        }
    }

    #[test]
    fn start_before_trace_rejected() {
        let tr = trace();
        assert!(apply_attack(&tr, &AttackSpec::dos(-1.0)).is_err());
        assert!(AttackSpec::fdi(80.0, 80.0, -0.06).validate().is_err());
    }
}
