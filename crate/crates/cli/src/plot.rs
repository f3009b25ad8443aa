//! Static SVG line chart of the voltage traces.

use std::path::Path;

use battsec::scenario::ScenarioRow;
use battsec::{Error, Result};
use plotters::prelude::*;

type Series<'a> = (&'a str, RGBColor, Box<dyn Fn(&ScenarioRow) -> Option<f64>>);

pub fn write_svg(rows: &[ScenarioRow], path: &Path) -> Result<()> {
    let series: Vec<Series> = vec![
        ("true", BLACK, Box::new(|r| Some(r.v_true))),
        ("measured", RED, Box::new(|r| Some(r.v_meas))),
        ("secure", BLUE, Box::new(|r| r.v_hat)),
        ("stage I only", MAGENTA, Box::new(|r| r.v_stage1)),
        ("open loop", GREEN, Box::new(|r| r.v_openloop)),
        ("closed loop", CYAN, Box::new(|r| r.v_closedloop)),
    ];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, _, f) in &series {
        for v in rows.iter().filter_map(|r| f(r)) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if rows.is_empty() || !lo.is_finite() {
        return Err(Error::domain("nothing to plot"));
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let t_end = rows.last().map_or(1.0, |r| r.t).max(1.0);

    let err = |e: String| Error::io(path, std::io::Error::other(e));
    let root = SVGBackend::new(path, (1000, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..t_end, (lo - pad)..(hi + pad))
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("t [s]")
        .y_desc("terminal voltage [V]")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (name, color, f) in &series {
        let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| f(r).map(|v| (r.t, v))).collect();
        if pts.is_empty() {
            continue;
        }
        let color = *color;
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(|e| err(e.to_string()))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}
