//! Error statistics of voltage estimates against the true terminal voltage.

use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub n: usize,
    pub rmse: f64,
    pub max_abs: f64,
    /// Mean signed error (estimate minus truth).
    pub mean: f64,
    /// Sum of squared errors.
    pub sse: f64,
}

/// Statistics of `est - truth` over the samples where both `est` is present
/// and `include(k)` holds; `None` if no sample qualifies.
pub fn error_stats(
    est: &[Option<f64>],
    truth: &[f64],
    include: impl Fn(usize) -> bool,
) -> Option<ErrorStats> {
    let mut n = 0usize;
    let mut sse = 0.0;
    let mut sum = 0.0;
    let mut max_abs = 0.0f64;
    for (k, (e, &v)) in est.iter().zip(truth).enumerate() {
        let Some(e) = e else { continue };
        if !include(k) {
            continue;
        }
        let d = e - v;
        n += 1;
        sse += d * d;
        sum += d;
        max_abs = max_abs.max(d.abs());
    }
    (n > 0).then(|| ErrorStats {
        n,
        rmse: (sse / n as f64).sqrt(),
        max_abs,
        mean: sum / n as f64,
        sse,
    })
}

pub fn rmse(est: &[f64], truth: &[f64]) -> f64 {
    let sse: f64 = est.iter().zip(truth).map(|(e, v)| (e - v) * (e - v)).sum();
    (sse / est.len().min(truth.len()).max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMetrics {
    pub name: String,
    pub whole: Option<ErrorStats>,
    pub attack: Option<ErrorStats>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub estimators: Vec<EstimatorMetrics>,
    pub attack_samples: usize,
    pub attack_onset: Option<f64>,
    pub soc_at_onset: Option<f64>,
    /// `(t, from, to)` for every change of the Coulomb-counted SOC region.
    pub region_switches: Vec<(f64, usize, usize)>,
}

impl MetricsReport {
    /// Scores each named estimate series over the whole trace and over the
    /// samples flagged in `attack`.
    pub fn compute(
        series: &[(&str, &[Option<f64>])],
        v_true: &[f64],
        attack: &[bool],
    ) -> Self {
        let estimators = series
            .iter()
            .map(|(name, est)| EstimatorMetrics {
                name: name.to_string(),
                whole: error_stats(est, v_true, |_| true),
                attack: error_stats(est, v_true, |k| attack.get(k).copied().unwrap_or(false)),
            })
            .collect();
        Self {
            estimators,
            attack_samples: attack.iter().filter(|&&a| a).count(),
            ..Self::default()
        }
    }

    pub fn get(&self, name: &str) -> Option<&EstimatorMetrics> {
        self.estimators.iter().find(|m| m.name == name)
    }

    pub fn attack_rmse(&self, name: &str) -> Option<f64> {
        self.get(name)?.attack.map(|s| s.rmse)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let fmt = |st: &Option<ErrorStats>| match st {
            Some(st) => format!(
                "{:>6} {:>12.6e} {:>12.6e} {:>13.6e}",
                st.n, st.rmse, st.max_abs, st.mean
            ),
            None => format!("{:>6} {:>12} {:>12} {:>13}", 0, "-", "-", "-"),
        };
        let _ = writeln!(s, "attack samples: {}", self.attack_samples);
        match (self.attack_onset, self.soc_at_onset) {
            (Some(t), Some(soc)) => {
                let _ = writeln!(s, "attack onset: t = {t} s, soc = {soc:.6}");
            }
            _ => {
                let _ = writeln!(s, "attack onset: none");
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<18} {:<8} {:>6} {:>12} {:>12} {:>13}",
            "estimator", "interval", "n", "rmse_V", "max_abs_V", "mean_err_V"
        );
        for m in &self.estimators {
            let _ = writeln!(s, "{:<18} {:<8} {}", m.name, "whole", fmt(&m.whole));
            let _ = writeln!(s, "{:<18} {:<8} {}", m.name, "attack", fmt(&m.attack));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "region switches:");
        if self.region_switches.is_empty() {
            let _ = writeln!(s, "  none");
        }
        for (t, from, to) in &self.region_switches {
            let _ = writeln!(s, "  t = {t} s: {from} -> {to}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_estimate_has_zero_error() {
        let v = [3.7, 3.8, 3.9];
        let est: Vec<_> = v.iter().map(|&x| Some(x)).collect();
        let st = error_stats(&est, &v, |_| true).unwrap();
        assert_eq!((st.rmse, st.max_abs, st.mean), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_offset() {
        let v = [3.7, 3.8, 3.9, 4.0];
        let est: Vec<_> = v.iter().map(|&x| Some(x + 0.06)).collect();
        let st = error_stats(&est, &v, |_| true).unwrap();
        assert!((st.rmse - 0.06).abs() < 1e-12);
        assert!((st.max_abs - 0.06).abs() < 1e-12);
    }

    #[test]
    fn absent_samples_are_skipped() {
        let est = [None, Some(1.0), None];
        let st = error_stats(&est, &[0.0, 0.0, 0.0], |_| true).unwrap();
        assert_eq!(st.n, 1);
        assert!(error_stats(&[None], &[0.0], |_| true).is_none());
    }

    #[test]
    fn no_attack_means_empty_attack_metrics() {
        let est = [Some(1.0), Some(2.0)];
        let r = MetricsReport::compute(&[("x", &est)], &[1.0, 1.0], &[false, false]);
        assert!(r.get("x").unwrap().attack.is_none());
        assert!(r.render().contains("attack onset: none"));
    }
}
