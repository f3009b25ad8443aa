//! Sampled plant traces and their CSV form.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 5] = ["t", "current", "soc_true", "v_true", "v_meas"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub current: f64,
    pub soc_true: f64,
    pub v_true: f64,
    pub v_meas: f64,
}

/// Equally spaced samples of the plant and of the measurement channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTrace {
    pub dt: f64,
    pub rows: Vec<TraceRow>,
}

impl TimeSeriesTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.t)
    }

    pub fn currents(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.current).collect()
    }

    pub fn v_true(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.v_true).collect()
    }

    pub fn v_meas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.v_meas).collect()
    }

    /// Checks equal spacing and ordering of the time column.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::domain("trace dt must be positive"));
        }
        for (k, r) in self.rows.iter().enumerate() {
            let expected = self.rows[0].t + k as f64 * self.dt;
            if (r.t - expected).abs() > 1e-9 * self.dt.max(1.0) * (k as f64 + 1.0) {
                return Err(Error::domain(format!(
                    "row {k}: t = {} breaks the {} s spacing",
                    r.t, self.dt
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.t.to_string(),
                r.current.to_string(),
                r.soc_true.to_string(),
                r.v_true.to_string(),
                r.v_meas.to_string(),
            ])?;
        }
        out.flush()
    }

    /// Reads a trace written by [`TimeSeriesTrace::write_csv`]. The spacing
    /// is taken from the first two rows.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr
            .headers()
            .map_err(|e| Error::domain(format!("bad trace CSV header: {e}")))?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::domain(format!("trace CSV lacks column `{name}`")))
        };
        let idx = [
            col("t")?,
            col("current")?,
            col("soc_true")?,
            col("v_true")?,
            col("v_meas")?,
        ];
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::domain(format!("trace CSV row {}: {e}", line + 2)))?;
            let mut vals = [0.0; 5];
            for (v, &i) in vals.iter_mut().zip(&idx) {
                *v = rec
                    .get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|e| Error::domain(format!("trace CSV row {}: {e}", line + 2)))?;
            }
            rows.push(TraceRow {
                t: vals[0],
                current: vals[1],
                soc_true: vals[2],
                v_true: vals[3],
                v_meas: vals[4],
            });
        }
        let dt = match rows.as_slice() {
            [a, b, ..] => b.t - a.t,
            _ => 1.0,
        };
        let trace = Self { dt, rows };
        trace.validate()?;
        Ok(trace)
    }
}
