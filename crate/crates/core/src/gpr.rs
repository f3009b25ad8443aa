//! Gaussian-process regression for the data-driven Stage II corrector.
//!
//! One model per SOC region maps `(current, SOC, V̄_p, E1)` to the residual
//! `V̄_p - V_nom` of the Stage-I-corrected self-learned prediction, where
//! `V̄_p = V_p + E1`. The secure estimate is then `V̄_p - y_hat`, i.e.
//! `E2 = E1 - y_hat`.
//!
//! The kernel is squared-exponential with one length scale per feature.
//! Features are standardized per model and the Gram matrix is factorized
//! with a plain left-looking Cholesky whose column updates are spread over
//! threads when the `parallel` feature is on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correction::{RegionTable, REGION_COUNT};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorKind, SecureEstimator};
use crate::koopman::WindowConfig;
use crate::par::Exec;
use crate::trace::TimeSeriesTrace;

pub const FEATURE_NAMES: [&str; 4] = ["current", "soc", "v_bar_p", "e1"];

const MAX_JITTER_ESCALATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GprHyper {
    pub length_scales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
    pub jitter: f64,
}

impl GprHyper {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.length_scales.len() != dim {
            return Err(Error::domain(format!(
                "{} length scales for {dim} features",
                self.length_scales.len()
            )));
        }
        let all = self
            .length_scales
            .iter()
            .chain([&self.signal_var, &self.noise_var, &self.jitter]);
        if all.clone().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::domain("GPR hyperparameters must be positive and finite"));
        }
        Ok(())
    }
}

/// Squared-exponential covariance with per-feature length scales.
pub fn kernel(x1: &[f64], x2: &[f64], hyper: &GprHyper) -> f64 {
    let r2: f64 = x1
        .iter()
        .zip(x2)
        .zip(&hyper.length_scales)
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum();
    hyper.signal_var * (-0.5 * r2).exp()
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let dim = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Dot product with four independent accumulators so the loop vectorizes;
/// the summation order is fixed, so results do not depend on the caller.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lower-triangular matrix in packed row-major storage of the full square.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    n: usize,
    data: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.data[i * self.n + j]
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..i * self.n + i + 1]
    }

    /// Factorizes the symmetric matrix `a` (row-major, `n x n`). Returns
    /// `None` if a pivot is not positive.
    pub fn factor(a: &[f64], n: usize, exec: Exec) -> Option<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let (done, rest) = l.split_at_mut((j + 1) * n);
            let row_j = &mut done[j * n..];
            let s = dot(&row_j[..j], &row_j[..j]);
            let pivot = a[j * n + j] - s;
            if !(pivot > 0.0) || !pivot.is_finite() {
                return None;
            }
            let diag = pivot.sqrt();
            row_j[j] = diag;
            let row_j = &row_j[..j];
            exec.for_each_chunk_mut(rest, n, |offset, row_i| {
                let i = j + 1 + offset;
                row_i[j] = (a[i * n + j] - dot(&row_i[..j], row_j)) / diag;
            });
        }
        Some(Self { n, data: l })
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for i in 0..self.n {
            let row = self.row(i);
            x[i] = (b[i] - dot(&row[..i], &x[..i])) / row[i];
        }
        x
    }

    /// Solves `L^T x = b`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        for i in (0..self.n).rev() {
            x[i] /= self.data[i * self.n + i];
            let xi = x[i];
            for (k, v) in x[..i].iter_mut().enumerate() {
                *v -= self.data[i * self.n + k] * xi;
            }
        }
        x
    }

    pub fn log_det_half(&self) -> f64 {
        (0..self.n).map(|i| self.data[i * self.n + i].ln()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GprModel {
    /// Training inputs as given (before standardization).
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub hyper: GprHyper,
    /// Jitter actually added to the diagonal after escalation.
    pub jitter_used: f64,
    pub scaling: Option<Standardizer>,
    pub region: usize,
    chol: CholeskyFactor,
    alpha: Vec<f64>,
    x_scaled: Vec<Vec<f64>>,
}

fn gram(x: &[Vec<f64>], hyper: &GprHyper, diag_add: f64, exec: Exec) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    exec.for_each_chunk_mut(&mut k, n.max(1), |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = kernel(&x[i], &x[j], hyper);
        }
        row[i] += diag_add;
    });
    k
}

impl GprModel {
    /// Fits a GP on raw features.
    pub fn fit(x_train: Vec<Vec<f64>>, y_train: Vec<f64>, hyper: GprHyper) -> Result<Self> {
        Self::fit_with(x_train, y_train, hyper, None, Exec::default())
    }

    /// Fits a GP on features standardized with statistics of `x_train`.
    pub fn fit_standardized(
        x_train: Vec<Vec<f64>>,
        y_train: Vec<f64>,
        hyper: GprHyper,
        exec: Exec,
    ) -> Result<Self> {
        let scaling = Standardizer::fit(&x_train);
        Self::fit_with(x_train, y_train, hyper, Some(scaling), exec)
    }

    pub fn fit_with(
        x_train: Vec<Vec<f64>>,
        y_train: Vec<f64>,
        hyper: GprHyper,
        scaling: Option<Standardizer>,
        exec: Exec,
    ) -> Result<Self> {
        let n = x_train.len();
        if n == 0 {
            return Err(Error::domain("GPR needs at least one training point"));
        }
        if y_train.len() != n {
            return Err(Error::domain(format!("{n} inputs but {} targets", y_train.len())));
        }
        let dim = x_train[0].len();
        if x_train.iter().any(|r| r.len() != dim) {
            return Err(Error::domain("ragged GPR feature matrix"));
        }
        if x_train.iter().flatten().chain(&y_train).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite GPR training data"));
        }
        hyper.validate(dim)?;
        let x_scaled: Vec<Vec<f64>> = match &scaling {
            Some(s) => x_train.iter().map(|r| s.apply(r)).collect(),
            None => x_train.clone(),
        };
        let mut jitter = hyper.jitter;
        let mut attempt = 0;
        let chol = loop {
            let k = gram(&x_scaled, &hyper, hyper.noise_var + jitter, exec);
            if let Some(c) = CholeskyFactor::factor(&k, n, exec) {
                break c;
            }
            if attempt == MAX_JITTER_ESCALATIONS {
                return Err(Error::numerical(format!(
                    "Cholesky failed (n = {n}, noise_var = {}, jitter up to {jitter})",
                    hyper.noise_var
                )));
            }
            attempt += 1;
            jitter *= 10.0;
            log::debug!("GPR factorization retry {attempt} with jitter {jitter}");
        };
        let alpha = chol.solve_upper(&chol.solve_lower(&y_train));
        Ok(Self {
            x_train,
            y_train,
            hyper,
            jitter_used: jitter,
            scaling,
            region: 0,
            chol,
            alpha,
            x_scaled,
        })
    }

    pub fn len(&self) -> usize {
        self.y_train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_train.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn chol_factor(&self) -> &CholeskyFactor {
        &self.chol
    }

    /// Training inputs after standardization.
    pub fn x_scaled(&self) -> &[Vec<f64>] {
        &self.x_scaled
    }

    fn k_star(&self, x_star: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xs = match &self.scaling {
            Some(s) => s.apply(x_star),
            None => x_star.to_vec(),
        };
        let k = self.x_scaled.iter().map(|x| kernel(x, &xs, &self.hyper)).collect();
        (xs, k)
    }

    /// Posterior mean only; skips the triangular solve of [`predict`](Self::predict).
    pub fn predict_mean(&self, x_star: &[f64]) -> f64 {
        dot(&self.k_star(x_star).1, &self.alpha)
    }

    /// Posterior mean and variance of the latent function at `x_star`.
    pub fn predict(&self, x_star: &[f64]) -> (f64, f64) {
        let (xs, k_star) = self.k_star(x_star);
        let mean = dot(&k_star, &self.alpha);
        let v = self.chol.solve_lower(&k_star);
        let var = kernel(&xs, &xs, &self.hyper) - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0))
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>], exec: Exec) -> Vec<(f64, f64)> {
        exec.map(xs, |x| self.predict(x))
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let fit: f64 = self.y_train.iter().zip(&self.alpha).map(|(y, a)| y * a).sum();
        -0.5 * fit - self.chol.log_det_half() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Writes the model as text. Loading refits from the stored data and
    /// reproduces identical predictions.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut s = String::new();
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        writeln!(s, "# battsec GPR model v1").unwrap();
        writeln!(s, "region {}", self.region).unwrap();
        writeln!(s, "dim {}", self.hyper.length_scales.len()).unwrap();
        writeln!(s, "n {}", self.len()).unwrap();
        writeln!(s, "length_scales {}", join(&self.hyper.length_scales)).unwrap();
        writeln!(s, "signal_var {}", self.hyper.signal_var).unwrap();
        writeln!(s, "noise_var {}", self.hyper.noise_var).unwrap();
        writeln!(s, "jitter {}", self.jitter_used).unwrap();
        match &self.scaling {
            Some(sc) => {
                writeln!(s, "feature_mean {}", join(&sc.mean)).unwrap();
                writeln!(s, "feature_std {}", join(&sc.std)).unwrap();
            }
            None => writeln!(s, "unscaled").unwrap(),
        }
        for (x, y) in self.x_train.iter().zip(&self.y_train) {
            writeln!(s, "row {} {}", join(x), y).unwrap();
        }
        w.write_all(s.as_bytes())
    }

    pub fn read_text<R: Read>(r: R, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut region = 0usize;
        let mut dim = None;
        let mut n_decl = None;
        let mut ls = None;
        let (mut sv, mut nv, mut jit) = (None, None, None);
        let (mut mean, mut std, mut unscaled) = (None, None, false);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let nums: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(lineno, format!("bad number: {e}")))?;
            let scalar = |v: &[f64]| {
                if v.len() == 1 {
                    Ok(v[0])
                } else {
                    Err(parse_err(lineno, format!("`{key}` expects one value")))
                }
            };
            match key {
                "region" => region = scalar(&nums)? as usize,
                "dim" => dim = Some(scalar(&nums)? as usize),
                "n" => n_decl = Some(scalar(&nums)? as usize),
                "length_scales" => ls = Some(nums),
                "signal_var" => sv = Some(scalar(&nums)?),
                "noise_var" => nv = Some(scalar(&nums)?),
                "jitter" => jit = Some(scalar(&nums)?),
                "feature_mean" => mean = Some(nums),
                "feature_std" => std = Some(nums),
                "unscaled" => unscaled = true,
                "row" => {
                    let d = dim.ok_or_else(|| parse_err(lineno, "`row` before `dim`".into()))?;
                    if nums.len() != d + 1 {
                        return Err(parse_err(lineno, format!("row needs {} values", d + 1)));
                    }
                    y.push(nums[d]);
                    x.push(nums[..d].to_vec());
                }
                other => return Err(parse_err(lineno, format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| parse_err(0, format!("missing `{what}`"));
        if n_decl != Some(y.len()) {
            return Err(parse_err(0, format!("declared n {n_decl:?} but found {} rows", y.len())));
        }
        let hyper = GprHyper {
            length_scales: ls.ok_or_else(|| missing("length_scales"))?,
            signal_var: sv.ok_or_else(|| missing("signal_var"))?,
            noise_var: nv.ok_or_else(|| missing("noise_var"))?,
            jitter: jit.ok_or_else(|| missing("jitter"))?,
        };
        let scaling = match (mean, std, unscaled) {
            (Some(mean), Some(std), false) => Some(Standardizer { mean, std }),
            (None, None, true) => None,
            _ => return Err(missing("feature_mean/feature_std")),
        };
        let mut model = Self::fit_with(x, y, hyper, scaling, Exec::default())?;
        model.region = region;
        Ok(model)
    }
}

/// Evaluates each candidate length-scale multiplier (applied to every
/// feature) by log marginal likelihood and returns the best one with its
/// score.
pub fn grid_search_length_scale(
    x: &[Vec<f64>],
    y: &[f64],
    base: &GprHyper,
    candidates: &[f64],
    standardize: bool,
    exec: Exec,
) -> Result<(f64, f64)> {
    let scaling = standardize.then(|| Standardizer::fit(x));
    let scores = exec.map(candidates, |&c| {
        let hyper = GprHyper {
            length_scales: vec![c; base.length_scales.len()],
            ..base.clone()
        };
        GprModel::fit_with(x.to_vec(), y.to_vec(), hyper, scaling.clone(), Exec::Sequential)
            .map(|m| m.log_marginal_likelihood())
    });
    let mut best: Option<(f64, f64)> = None;
    for (&c, s) in candidates.iter().zip(scores) {
        let s = s?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.ok_or_else(|| Error::domain("empty length-scale grid"))
}

/// Training settings for the per-region model bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GprSettings {
    /// Per standardized feature.
    pub length_scales: Vec<f64>,
    /// `None` uses the mean square of the targets.
    pub signal_var: Option<f64>,
    pub noise_var: f64,
    pub jitter: f64,
    /// Maximum training rows per region.
    pub n_max: usize,
    /// Candidate length-scale multipliers; empty disables the search.
    pub grid: Vec<f64>,
    /// Spacing of the self-learning onsets used to generate data, seconds.
    pub onset_every: f64,
    /// Duration of each self-learning run, seconds.
    pub run_length: f64,
    /// Length of the nominal charging sweep used for training, seconds.
    pub t_end: f64,
}

impl Default for GprSettings {
    fn default() -> Self {
        Self {
            length_scales: vec![1.0; 4],
            signal_var: None,
            noise_var: 1e-6,
            jitter: 1e-10,
            n_max: 2000,
            grid: Vec::new(),
            onset_every: 50.0,
            run_length: 900.0,
            t_end: 6000.0,
        }
    }
}

impl GprSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::config("gpr.n_max must be positive"));
        }
        if !(self.onset_every > 0.0) || !(self.run_length > 0.0) || !(self.t_end > 0.0) {
            return Err(Error::config(
                "gpr.onset_every, gpr.run_length and gpr.t_end must be positive",
            ));
        }
        if self.grid.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::config("gpr.grid entries must be positive"));
        }
        Ok(())
    }

    fn hyper_for(&self, y: &[f64]) -> GprHyper {
        let second_moment = y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64;
        let signal_var = self
            .signal_var
            .unwrap_or(if second_moment > 0.0 { second_moment } else { 1e-6 });
        GprHyper {
            length_scales: self.length_scales.clone(),
            signal_var,
            noise_var: self.noise_var,
            jitter: self.jitter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRow {
    /// Time of the sample in the nominal sweep.
    pub t: f64,
    /// Onset time of the self-learning run that produced it.
    pub onset: f64,
    pub features: [f64; 4],
    /// `V̄_p - V_nom`.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDataset {
    pub region: usize,
    pub rows: Vec<TrainingRow>,
}

const DATASET_HEADER: [&str; 7] = ["t", "onset", "current", "soc", "v_bar_p", "e1", "target"];

impl RegionDataset {
    pub fn file_name(region: usize) -> String {
        format!("region_{region}.csv")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(DATASET_HEADER)?;
        for r in &self.rows {
            let mut rec = vec![r.t.to_string(), r.onset.to_string()];
            rec.extend(r.features.iter().map(f64::to_string));
            rec.push(r.target.to_string());
            out.write_record(rec)?;
        }
        out.flush()
    }

    pub fn read_csv<R: Read>(region: usize, r: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse { path: path.into(), line: 1, msg: e.to_string() })?;
        if headers.iter().ne(DATASET_HEADER) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!("expected header {}", DATASET_HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let err = |msg: String| Error::Parse { path: path.into(), line: i + 2, msg };
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let v: Vec<f64> = rec
                .iter()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e: std::num::ParseFloatError| err(e.to_string()))?;
            if v.len() != DATASET_HEADER.len() {
                return Err(err("wrong field count".into()));
            }
            rows.push(TrainingRow {
                t: v[0],
                onset: v[1],
                features: [v[2], v[3], v[4], v[5]],
                target: v[6],
            });
        }
        Ok(Self { region, rows })
    }
}

/// Keeps at most `n_max` rows, evenly spaced over the time-ordered rows.
fn subsample(mut rows: Vec<TrainingRow>, n_max: usize) -> Vec<TrainingRow> {
    rows.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.onset.total_cmp(&b.onset)));
    if rows.len() <= n_max {
        return rows;
    }
    let n = rows.len();
    (0..n_max).map(|i| rows[i * n / n_max]).collect()
}

/// Generates per-region GPR training data from a nominal (attack-free)
/// trace.
///
/// Stage-I-only self-learning runs are launched at onsets spaced
/// `settings.onset_every` apart, starting at the first sample where a full
/// nominal prediction window is available; each run lasts
/// `settings.run_length`. Every self-learned sample becomes a row
/// `(I, SOC, V̄_p, E1) -> V̄_p - V_nom`, filed under the region of its
/// Coulomb-counted SOC. Runs whose self-learning diverges are dropped.
pub fn build_training_set(
    nominal_trace: &TimeSeriesTrace,
    koopman_cfg: &WindowConfig,
    regions: &RegionTable,
    capacity: f64,
    settings: &GprSettings,
    exec: Exec,
) -> Result<Vec<RegionDataset>> {
    koopman_cfg.validate()?;
    settings.validate()?;
    let rows = &nominal_trace.rows;
    let first_onset = koopman_cfg.s_learn + koopman_cfg.slide();
    if rows.len() <= first_onset {
        return Err(Error::domain(format!(
            "nominal trace has {} samples; at least {} are needed for one sliding window",
            rows.len(),
            first_onset + 1
        )));
    }
    let dt = nominal_trace.dt;
    let stride = ((settings.onset_every / dt).round() as usize).max(1);
    let run_len = ((settings.run_length / dt).round() as usize).max(1);
    let onsets: Vec<usize> = (first_onset..rows.len()).step_by(stride).collect();

    let runs = exec.map(&onsets, |&onset| -> Result<Vec<TrainingRow>> {
        let mut est = SecureEstimator::new(
            *koopman_cfg,
            EstimatorKind::StageIOnly,
            regions.clone(),
            capacity,
            dt,
            rows[0].soc_true,
            None,
        )?;
        let end = (onset + run_len).min(rows.len());
        let mut out = Vec::with_capacity(end - onset);
        for (k, r) in rows[..end].iter().enumerate() {
            let attacked = k >= onset;
            let step = est.step(r.current, r.v_meas, attacked).map_err(|e| e.at_time(r.t))?;
            if attacked {
                let v_bar = step.v_hat.expect("self-learning step yields an estimate");
                let e1 = step.e1.expect("self-learning step carries E1");
                out.push(TrainingRow {
                    t: r.t,
                    onset: rows[onset].t,
                    features: [r.current, step.soc_cc, v_bar, e1],
                    target: v_bar - r.v_true,
                });
            }
        }
        Ok(out)
    });

    let mut by_region: BTreeMap<usize, Vec<TrainingRow>> = BTreeMap::new();
    for (run, onset) in runs.into_iter().zip(&onsets) {
        let run = match run {
            Ok(run) => run,
            Err(e) if !e.is_config() => {
                log::warn!("dropping self-learning run from t = {} s: {e}", rows[*onset].t);
                continue;
            }
            Err(e) => return Err(e),
        };
        for row in run {
            by_region
                .entry(regions.region(row.features[1]))
                .or_default()
                .push(row);
        }
    }
    Ok(by_region
        .into_iter()
        .map(|(region, rows)| RegionDataset {
            region,
            rows: subsample(rows, settings.n_max),
        })
        .collect())
}

/// Per-region model bank.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GprBank {
    pub models: BTreeMap<usize, GprModel>,
}

impl GprBank {
    pub fn train(datasets: &[RegionDataset], settings: &GprSettings, exec: Exec) -> Result<Self> {
        settings.validate()?;
        let fitted = exec.map(datasets, |ds| -> Result<GprModel> {
            if ds.rows.is_empty() {
                return Err(Error::domain(format!("region {} has no training rows", ds.region)));
            }
            let x: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.features.to_vec()).collect();
            let y: Vec<f64> = ds.rows.iter().map(|r| r.target).collect();
            let mut hyper = settings.hyper_for(&y);
            if !settings.grid.is_empty() {
                let (scale, _) =
                    grid_search_length_scale(&x, &y, &hyper, &settings.grid, true, Exec::Sequential)?;
                hyper.length_scales = vec![scale; hyper.length_scales.len()];
            }
            let mut m = GprModel::fit_standardized(x, y, hyper, Exec::Sequential)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("region {}: {msg}", ds.region)),
                    e => e,
                })?;
            m.region = ds.region;
            Ok(m)
        });
        let mut models = BTreeMap::new();
        for m in fitted {
            let m = m?;
            models.insert(m.region, m);
        }
        Ok(Self { models })
    }

    pub fn regions(&self) -> Vec<usize> {
        self.models.keys().copied().collect()
    }

    pub fn model(&self, region: usize) -> Result<&GprModel> {
        self.models.get(&region).ok_or_else(|| {
            Error::config(format!(
                "no GPR model for SOC region {region}; available regions: {:?}",
                self.regions()
            ))
        })
    }

    /// `E2 = E1 - y_hat` for features `(current, SOC, V̄_p, E1)`.
    pub fn e2(&self, features: [f64; 4], region: usize) -> Result<f64> {
        Ok(features[3] - self.model(region)?.predict_mean(&features))
    }

    pub fn model_path(dir: &Path, region: usize) -> PathBuf {
        dir.join(format!("region_{region}.gpr"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (&region, m) in &self.models {
            let path = Self::model_path(dir, region);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            m.write_text(std::io::BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::config(format!(
                "GPR model directory {} does not exist",
                dir.display()
            )));
        }
        let mut models = BTreeMap::new();
        for region in 1..=REGION_COUNT {
            let path = Self::model_path(dir, region);
            if !path.exists() {
                continue;
            }
            let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut m = GprModel::read_text(f, &path)?;
            m.region = region;
            models.insert(region, m);
        }
        if models.is_empty() {
            return Err(Error::config(format!(
                "no region_<j>.gpr files in {}",
                dir.display()
            )));
        }
        Ok(Self { models })
    }
}

/// Writes one `region_<j>.csv` per dataset into `dir`.
pub fn save_datasets(datasets: &[RegionDataset], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ds in datasets {
        let path = dir.join(RegionDataset::file_name(ds.region));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        ds.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads every `region_<j>.csv` present in `dir`.
pub fn load_datasets(dir: &Path) -> Result<Vec<RegionDataset>> {
    if !dir.is_dir() {
        return Err(Error::config(format!(
            "training data directory {} does not exist",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for region in 1..=REGION_COUNT {
        let path = dir.join(RegionDataset::file_name(region));
        if !path.exists() {
            continue;
        }
        let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        out.push(RegionDataset::read_csv(region, f, &path)?);
    }
    if out.is_empty() {
        return Err(Error::config(format!(
            "no region_<j>.csv files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Stage II compensation from the bank entry of the sample's SOC region.
pub fn gpr_e2(models: &GprBank, features: [f64; 4]) -> Result<f64> {
    models.e2(features, RegionTable::default().region(features[1]))
}
