//! SVG forecast charts: one panel per variable with the truth line, the
//! sample median and the 5-95% band.

use std::fmt::Write as _;

use crate::copula::ForecastSamples;
use crate::data::SeriesFrame;
use crate::error::{Error, Result};

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 30.0;

struct Panel {
    variable: usize,
    truth: Vec<(f64, f64)>,
    median: Vec<(f64, f64)>,
    lo: Vec<(f64, f64)>,
    hi: Vec<(f64, f64)>,
}

/// Renders the chart. With `truth`, x positions come from its time axis and
/// the full truth series of each variable is drawn.
pub fn forecast_svg(samples: &ForecastSamples, truth: Option<&SeriesFrame>) -> Result<String> {
    if samples.n_points() == 0 || samples.n_draws() == 0 {
        return Err(Error::Invalid("nothing to plot".into()));
    }
    let mut vars: Vec<usize> = samples.variables.clone();
    vars.sort_unstable();
    vars.dedup();
    let mut panels = Vec::with_capacity(vars.len());
    for &v in &vars {
        let ks: Vec<usize> = (0..samples.n_points()).filter(|&k| samples.variables[k] == v).collect();
        let mut xs = Vec::with_capacity(ks.len());
        for (i, &k) in ks.iter().enumerate() {
            let x = match truth {
                Some(f) => f.axis.step_of(&samples.timestamps[k])? as f64,
                None => i as f64,
            };
            xs.push(x);
        }
        let mut order: Vec<usize> = (0..ks.len()).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let series = |q: f64| order.iter().map(|&i| (xs[i], samples.quantile(ks[i], q))).collect::<Vec<_>>();
        let mut tr: Vec<(f64, f64)> = match truth {
            Some(f) => f
                .points
                .iter()
                .filter(|p| p.variable == v)
                .filter_map(|p| p.value.map(|y| (p.timestamp as f64, y)))
                .collect(),
            None => Vec::new(),
        };
        tr.sort_by(|a, b| a.0.total_cmp(&b.0));
        panels.push(Panel {
            variable: v,
            truth: tr,
            median: series(0.5),
            lo: series(0.05),
            hi: series(0.95),
        });
    }

    let height = panels.len() as f64 * (PANEL_H + MARGIN) + MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" viewBox="0 0 {} {height}">"#,
        PANEL_W + 2.0 * MARGIN,
        PANEL_W + 2.0 * MARGIN
    );
    for (pi, p) in panels.iter().enumerate() {
        let top = MARGIN + pi as f64 * (PANEL_H + MARGIN);
        let all = p.truth.iter().chain(&p.lo).chain(&p.hi);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in all {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * PANEL_W;
        let py = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        let pts = |v: &[(f64, f64)]| {
            v.iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, r#"<g class="panel" data-variable="{}">"#, p.variable);
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#ccc"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12">variable {}</text>"#,
            MARGIN,
            top - 6.0,
            p.variable
        );
        let band: Vec<(f64, f64)> = p.lo.iter().chain(p.hi.iter().rev()).copied().collect();
        let _ = writeln!(
            s,
            r##"<polygon class="band" points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##,
            pts(&band)
        );
        if !p.truth.is_empty() {
            let _ = writeln!(
                s,
                r##"<polyline class="truth" points="{}" fill="none" stroke="#222" stroke-width="1.2"/>"##,
                pts(&p.truth)
            );
        }
        let _ = writeln!(
            s,
            r##"<polyline class="median" points="{}" fill="none" stroke="#d62728" stroke-width="1.5"/>"##,
            pts(&p.median)
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
