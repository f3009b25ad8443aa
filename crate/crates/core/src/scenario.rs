//! End-to-end scenario: plant and charger, sensor noise, attack channel,
//! secure estimator, baselines, metrics and file output.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attack::{detector_flag, AttackChannel, AttackSpec};
use crate::battery::{step_ecm, BatteryState, CccvCharger, ChargePhase};
use crate::config::{EstimatorId, FeedbackSource, ScenarioConfig};
use crate::correction::{CorrectorMode, RegionTable};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorKind, SecureEstimator};
use crate::gpr::{build_training_set, GprBank, RegionDataset};
use crate::metrics::MetricsReport;
use crate::observers::{closed_loop_observe, open_loop_observe};
use crate::par::Exec;
use crate::trace::{TimeSeriesTrace, TraceRow};

pub const SCENARIO_HEADER: [&str; 13] = [
    "t",
    "current",
    "soc_true",
    "soc_cc",
    "v_true",
    "v_meas",
    "v_pred",
    "e1",
    "v_hat",
    "v_openloop",
    "v_closedloop",
    "region",
    "attack_active",
];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScenarioRow {
    pub t: f64,
    pub current: f64,
    pub soc_true: f64,
    pub soc_cc: f64,
    pub v_true: f64,
    /// Delivered measurement, after noise and attack.
    pub v_meas: f64,
    pub v_pred: Option<f64>,
    pub e1: Option<f64>,
    pub v_hat: Option<f64>,
    /// Stage-I-only self-learning estimate. Not part of `trace.csv`.
    pub v_stage1: Option<f64>,
    pub v_openloop: Option<f64>,
    pub v_closedloop: Option<f64>,
    pub region: usize,
    pub attack_active: bool,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub rows: Vec<ScenarioRow>,
    pub report: MetricsReport,
    /// Number of samples handled by the secure branch.
    pub secure_steps: usize,
    /// Sample indices whose measurement the secure estimator read.
    pub measurement_reads: Vec<usize>,
}

impl ScenarioOutput {
    pub fn column(&self, f: impl Fn(&ScenarioRow) -> Option<f64>) -> Vec<Option<f64>> {
        self.rows.iter().map(f).collect()
    }
}

/// Name under which the secure estimate is reported.
pub fn secure_name(corrector: CorrectorMode) -> &'static str {
    match corrector {
        CorrectorMode::Empirical => "secure_empirical",
        CorrectorMode::Gpr => "secure_gpr",
    }
}

/// Metrics of every estimate column present in `rows`.
pub fn scenario_metrics(rows: &[ScenarioRow], secure: &str) -> MetricsReport {
    let v_true: Vec<f64> = rows.iter().map(|r| r.v_true).collect();
    let attack: Vec<bool> = rows.iter().map(|r| r.attack_active).collect();
    let col = |f: &dyn Fn(&ScenarioRow) -> Option<f64>| rows.iter().map(f).collect::<Vec<_>>();
    let meas = col(&|r| Some(r.v_meas));
    let pred = col(&|r| r.v_pred.filter(|_| !r.attack_active));
    let hat = col(&|r| r.v_hat);
    let stage1 = col(&|r| r.v_stage1);
    let ol = col(&|r| r.v_openloop);
    let cl = col(&|r| r.v_closedloop);
    let mut series: Vec<(&str, &[Option<f64>])> = vec![("measurement", &meas), ("nominal_prediction", &pred)];
    for (name, c) in [(secure, &hat), ("stage1_only", &stage1), ("open_loop", &ol), ("closed_loop", &cl)] {
        if c.iter().any(Option::is_some) {
            series.push((name, c));
        }
    }
    let mut report = MetricsReport::compute(&series, &v_true, &attack);
    if let Some(r) = rows.iter().find(|r| r.attack_active) {
        report.attack_onset = Some(r.t);
        report.soc_at_onset = Some(r.soc_true);
    }
    report.region_switches = rows
        .windows(2)
        .filter(|w| w[0].region != w[1].region)
        .map(|w| (w[1].t, w[0].region, w[1].region))
        .collect();
    report
}

/// Simulates the configured (aged) plant without attack and returns the
/// nominal trace with sensor noise applied to `v_meas`.
pub fn simulate_nominal(cfg: &ScenarioConfig) -> Result<TimeSeriesTrace> {
    let mut nominal = cfg.clone();
    nominal.attack = AttackSpec::none();
    nominal.estimator.enabled.clear();
    let out = run_scenario_with_bank(&nominal, None)?;
    Ok(TimeSeriesTrace {
        dt: cfg.charge.dt,
        rows: out
            .rows
            .iter()
            .map(|r| TraceRow {
                t: r.t,
                current: r.current,
                soc_true: r.soc_true,
                v_true: r.v_true,
                v_meas: r.v_meas,
            })
            .collect(),
    })
}

/// Generates GPR training data from a nominal charging sweep of
/// `cfg.gpr.t_end` seconds starting at `cfg.charge.soc0`.
pub fn generate_gpr_data(cfg: &ScenarioConfig, exec: Exec) -> Result<Vec<RegionDataset>> {
    cfg.validate()?;
    let mut sweep = cfg.clone();
    sweep.charge.t_end = cfg.gpr.t_end;
    let trace = simulate_nominal(&sweep)?;
    build_training_set(
        &trace,
        &cfg.koopman,
        &RegionTable::default(),
        cfg.plant_params()?.capacity,
        &cfg.gpr,
        exec,
    )
}

/// Runs a scenario, loading the GPR bank from `estimator.models` when the
/// GPR corrector is configured.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutput> {
    cfg.validate()?;
    let bank = match (&cfg.estimator.models, cfg.estimator.corrector) {
        (Some(dir), CorrectorMode::Gpr) if cfg.estimator.is_enabled(EstimatorId::Secure) => {
            Some(Arc::new(GprBank::load(dir)?))
        }
        _ => None,
    };
    run_scenario_with_bank(cfg, bank)
}

/// Runs a scenario with an already loaded GPR bank (required when the GPR
/// corrector is configured, ignored otherwise).
pub fn run_scenario_with_bank(
    cfg: &ScenarioConfig,
    bank: Option<Arc<GprBank>>,
) -> Result<ScenarioOutput> {
    cfg.validate_without_models()?;
    let plant = cfg.plant_params()?;
    let curve = plant.ocv_curve()?;
    let model_curve = cfg.battery.ocv_curve()?;
    let ch = &cfg.charge;
    let est = &cfg.estimator;

    let make = |kind: EstimatorKind| {
        SecureEstimator::new(
            cfg.koopman,
            kind,
            RegionTable::default(),
            cfg.battery.capacity,
            ch.dt,
            ch.soc0,
            Some(model_curve.clone()),
        )
    };
    let mut secure = if est.is_enabled(EstimatorId::Secure) {
        let kind = match est.corrector {
            CorrectorMode::Empirical => EstimatorKind::Empirical,
            CorrectorMode::Gpr => EstimatorKind::Gpr(bank.ok_or_else(|| {
                Error::config("corrector = \"gpr\" requires a trained model bank")
            })?),
        };
        Some(make(kind)?)
    } else {
        None
    };
    let mut stage1 = if est.is_enabled(EstimatorId::Stage1Only) {
        Some(make(EstimatorKind::StageIOnly)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sensor.seed);
    let noise = Normal::new(0.0, cfg.sensor.noise_std)
        .map_err(|e| Error::config(format!("sensor.noise_std: {e}")))?;
    let mut channel = AttackChannel::new(cfg.attack)?;
    let mut charger = CccvCharger::new(ch.i_cc)?;
    let mut state = BatteryState::at_rest(ch.soc0);
    let mut offset = 0.0;
    let n_steps = (ch.t_end / ch.dt + 1e-9).floor() as usize;
    let mut rows = Vec::with_capacity(n_steps + 1);

    for k in 0..=n_steps {
        let t = k as f64 * ch.dt;
        let current = charger.command(&state, &plant, &curve, offset)?.unwrap_or(0.0);
        let v_true = curve.eval(state.soc)? + state.v_rc1 + state.v_rc2 + plant.r0 * current;
        let sensed = if cfg.sensor.noise_std > 0.0 {
            v_true + noise.sample(&mut rng)
        } else {
            v_true
        };
        let v_meas = channel.deliver(t, sensed);
        let flag = detector_flag(t, &cfg.attack);

        let mut row = ScenarioRow {
            t,
            current,
            soc_true: state.soc,
            soc_cc: f64::NAN,
            v_true,
            v_meas,
            attack_active: flag,
            ..ScenarioRow::default()
        };
        if let Some(s) = secure.as_mut() {
            let o = s.step(current, v_meas, flag).map_err(|e| e.at_time(t))?;
            row.soc_cc = o.soc_cc;
            row.region = o.region;
            row.v_pred = o.v_pred;
            row.e1 = o.e1;
            row.v_hat = o.v_hat;
        }
        if let Some(s) = stage1.as_mut() {
            let o = s.step(current, v_meas, flag).map_err(|e| e.at_time(t))?;
            if secure.is_none() {
                row.soc_cc = o.soc_cc;
                row.region = o.region;
                row.v_pred = o.v_pred;
            }
            row.v_stage1 = o.v_hat;
        }
        rows.push(row);

        offset = match ch.controller_feedback {
            FeedbackSource::TrueVoltage => 0.0,
            FeedbackSource::Measured => v_meas - v_true,
            FeedbackSource::Secure => row.v_hat.unwrap_or(v_meas) - v_true,
        };
        if charger.phase() == ChargePhase::Done {
            break;
        }
        state = step_ecm(state, current, &plant, ch.dt)?;
    }

    if secure.is_none() && stage1.is_none() {
        fill_coulomb_count(&mut rows, cfg);
    }

    let currents: Vec<f64> = rows.iter().map(|r| r.current).collect();
    let init = BatteryState::at_rest(ch.soc0);
    if est.is_enabled(EstimatorId::OpenLoop) {
        let v = open_loop_observe(&cfg.battery, &currents, ch.dt, init)?;
        rows.iter_mut().zip(v).for_each(|(r, v)| r.v_openloop = Some(v));
    }
    if est.is_enabled(EstimatorId::ClosedLoop) {
        let meas: Vec<f64> = rows.iter().map(|r| r.v_meas).collect();
        let v = closed_loop_observe(&cfg.battery, &currents, &meas, ch.dt, est.observer_gain, init)?;
        rows.iter_mut().zip(v).for_each(|(r, v)| r.v_closedloop = Some(v));
    }

    let report = scenario_metrics(&rows, secure_name(est.corrector));
    let (secure_steps, measurement_reads) = secure
        .map(|s| (s.secure_steps(), s.measurement_reads().to_vec()))
        .unwrap_or_default();
    Ok(ScenarioOutput {
        rows,
        report,
        secure_steps,
        measurement_reads,
    })
}

fn fill_coulomb_count(rows: &mut [ScenarioRow], cfg: &ScenarioConfig) {
    let table = RegionTable::default();
    let mut soc = cfg.charge.soc0;
    let mut prev = None;
    for r in rows {
        if let Some(i) = prev {
            soc = crate::koopman::coulomb_count(soc, i, cfg.charge.dt, cfg.battery.capacity);
        }
        r.soc_cc = soc;
        r.region = table.region(soc);
        prev = Some(r.current);
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_scenario_csv<W: Write>(rows: &[ScenarioRow], w: W) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SCENARIO_HEADER)?;
    for r in rows {
        out.write_record([
            r.t.to_string(),
            r.current.to_string(),
            r.soc_true.to_string(),
            r.soc_cc.to_string(),
            r.v_true.to_string(),
            r.v_meas.to_string(),
            opt(r.v_pred),
            opt(r.e1),
            opt(r.v_hat),
            opt(r.v_openloop),
            opt(r.v_closedloop),
            r.region.to_string(),
            u8::from(r.attack_active).to_string(),
        ])?;
    }
    out.flush()
}

pub fn read_scenario_csv<R: Read>(r: R, path: &Path) -> Result<Vec<ScenarioRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if headers.iter().ne(SCENARIO_HEADER) {
        return Err(parse_err(
            1,
            format!("expected header {}", SCENARIO_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse()
                .map_err(|e| parse_err(line, format!("{}: {e}", SCENARIO_HEADER[j])))
        };
        let maybe = |j: usize| -> Result<Option<f64>> {
            if rec[j].is_empty() {
                Ok(None)
            } else {
                num(j).map(Some)
            }
        };
        let flag = match &rec[12] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(line, format!("attack_active: bad flag {other:?}"))),
        };
        rows.push(ScenarioRow {
            t: num(0)?,
            current: num(1)?,
            soc_true: num(2)?,
            soc_cc: num(3)?,
            v_true: num(4)?,
            v_meas: num(5)?,
            v_pred: maybe(6)?,
            e1: maybe(7)?,
            v_hat: maybe(8)?,
            v_stage1: None,
            v_openloop: maybe(9)?,
            v_closedloop: maybe(10)?,
            region: rec[11]
                .parse()
                .map_err(|e| parse_err(line, format!("region: {e}")))?,
            attack_active: flag,
        });
    }
    Ok(rows)
}

/// Writes `trace.csv` and `report.txt` into `dir`.
pub fn emit_outputs(out: &ScenarioOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trace = dir.join("trace.csv");
    let f = std::fs::File::create(&trace).map_err(|e| Error::io(&trace, e))?;
    write_scenario_csv(&out.rows, std::io::BufWriter::new(f)).map_err(|e| Error::io(&trace, e))?;
    let report = dir.join("report.txt");
    std::fs::write(&report, out.report.render()).map_err(|e| Error::io(&report, e))?;
    Ok(())
}
