//! Scenario configuration, read from TOML.
//!
//! Every section and key is optional; omitted values take the defaults
//! below. Quantities are SI (seconds, volts, amperes, ohms, farads) except
//! capacity, which is in ampere-hours.
//!
//! ```toml
//! [battery]            # plant parameters, see BatteryParams
//! capacity = 7.0
//! [aging]
//! factor = 1.5         # resistance multiplier applied to the plant only
//! scope = "series"     # or "all"
//! [charge]
//! i_cc = 5.0
//! soc0 = 0.35
//! dt = 1.0
//! t_end = 900.0
//! controller_feedback = "true_voltage"   # or "measured", "secure"
//! [sensor]
//! noise_std = 0.0
//! seed = 0
//! [attack]
//! kind = "dos_hold"    # "none", "dos_hold", "fdi_bias"
//! t_start = 50.0
//! [koopman]
//! embed_depth = 5
//! [estimator]
//! corrector = "empirical"                # or "gpr"
//! models = "models"                      # required for gpr
//! enabled = ["secure", "stage1_only", "open_loop", "closed_loop"]
//! [gpr]                # training settings, see GprSettings
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::battery::{age_params, AgingScope, BatteryParams};
use crate::correction::CorrectorMode;
use crate::error::{Error, Result};
use crate::gpr::GprSettings;
use crate::koopman::WindowConfig;
use crate::observers::DEFAULT_OBSERVER_GAIN;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgingConfig {
    pub factor: f64,
    pub scope: AgingScope,
}

impl Default for AgingConfig {
    fn default() -> Self {
        Self {
            factor: 1.0,
            scope: AgingScope::Series,
        }
    }
}

/// Voltage the CCCV controller regulates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    #[default]
    TrueVoltage,
    /// The delivered (possibly corrupted) measurement.
    Measured,
    /// The secure estimate while it exists, the measurement otherwise.
    Secure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChargeConfig {
    pub i_cc: f64,
    pub soc0: f64,
    pub dt: f64,
    pub t_end: f64,
    pub controller_feedback: FeedbackSource,
}

impl Default for ChargeConfig {
    fn default() -> Self {
        Self {
            i_cc: 5.0,
            soc0: 0.35,
            dt: 1.0,
            t_end: 900.0,
            controller_feedback: FeedbackSource::TrueVoltage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// Standard deviation of additive Gaussian measurement noise, volts.
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    Secure,
    Stage1Only,
    OpenLoop,
    ClosedLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub corrector: CorrectorMode,
    /// Directory of trained per-region GPR models.
    pub models: Option<PathBuf>,
    pub enabled: Vec<EstimatorId>,
    /// Closed-loop observer gain on `(soc, v_rc1, v_rc2)`.
    pub observer_gain: [f64; 3],
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            corrector: CorrectorMode::Empirical,
            models: None,
            enabled: vec![
                EstimatorId::Secure,
                EstimatorId::Stage1Only,
                EstimatorId::OpenLoop,
                EstimatorId::ClosedLoop,
            ],
            observer_gain: DEFAULT_OBSERVER_GAIN,
        }
    }
}

impl EstimatorConfig {
    pub fn is_enabled(&self, id: EstimatorId) -> bool {
        self.enabled.contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub battery: BatteryParams,
    pub aging: AgingConfig,
    pub charge: ChargeConfig,
    pub sensor: SensorConfig,
    pub attack: AttackSpec,
    pub koopman: WindowConfig,
    pub estimator: EstimatorConfig,
    pub gpr: GprSettings,
    pub output: OutputConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Plant parameters after aging.
    pub fn plant_params(&self) -> Result<BatteryParams> {
        age_params(&self.battery, self.aging.factor, self.aging.scope)
    }

    /// Checks everything that can be checked without simulating, including
    /// the existence of the GPR model directory when it is needed.
    pub fn validate(&self) -> Result<()> {
        self.validate_without_models()?;
        if self.estimator.corrector == CorrectorMode::Gpr
            && self.estimator.is_enabled(EstimatorId::Secure)
        {
            match &self.estimator.models {
                None => {
                    return Err(Error::config(
                        "corrector = \"gpr\" requires estimator.models",
                    ))
                }
                Some(dir) if !dir.is_dir() => {
                    return Err(Error::config(format!(
                        "GPR model directory {} does not exist",
                        dir.display()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) minus the GPR model directory check.
    pub fn validate_without_models(&self) -> Result<()> {
        self.battery.validate()?;
        self.plant_params()?;
        self.attack.validate()?;
        self.koopman.validate()?;
        self.gpr.validate()?;
        let c = &self.charge;
        if !(c.i_cc > 0.0) || !c.i_cc.is_finite() {
            return Err(Error::config(format!("charge.i_cc must be positive, got {}", c.i_cc)));
        }
        if !(0.0..=1.0).contains(&c.soc0) {
            return Err(Error::config(format!("charge.soc0 {} outside [0, 1]", c.soc0)));
        }
        if !(c.dt > 0.0) || !c.dt.is_finite() {
            return Err(Error::config(format!("charge.dt must be positive, got {}", c.dt)));
        }
        if !(c.t_end >= 0.0) || !c.t_end.is_finite() {
            return Err(Error::config(format!("charge.t_end must be non-negative, got {}", c.t_end)));
        }
        if !(self.sensor.noise_std >= 0.0) || !self.sensor.noise_std.is_finite() {
            return Err(Error::config("sensor.noise_std must be non-negative"));
        }
        let g = self.estimator.observer_gain;
        if g.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || g[0] > 1.0 {
            return Err(Error::config(format!(
                "estimator.observer_gain {g:?} must be non-negative with SOC gain at most 1"
            )));
        }
        Ok(())
    }
}
