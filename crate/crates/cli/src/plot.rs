//! Hand-rolled SVG line charts of forecast tables.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use defm_core::metrics::ScorePair;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 170.0, 30.0, 50.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One parsed forecast table (`time_index,estimate,spread,truth`).
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSeries {
    pub label: String,
    pub time: Vec<f64>,
    pub estimate: Vec<f64>,
    pub truth: Option<Vec<f64>>,
}

impl ForecastSeries {
    pub fn parse(label: &str, text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers()?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let (Some(ti), Some(ei)) = (col("time_index"), col("estimate")) else {
            bail!("{label}: expected time_index and estimate columns");
        };
        let tr = col("truth");
        let (mut time, mut estimate, mut truth) = (Vec::new(), Vec::new(), Vec::new());
        let mut all_truth = tr.is_some();
        for (k, rec) in reader.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse()
                    .with_context(|| format!("{label}: row {}, column {}", k + 2, i + 1))
            };
            time.push(num(ti)?);
            estimate.push(num(ei)?);
            match tr.map(|i| rec.get(i).unwrap_or("")) {
                Some(v) if !v.is_empty() => truth.push(num(tr.unwrap())?),
                _ => all_truth = false,
            }
        }
        if time.is_empty() {
            bail!("{label}: no forecast rows");
        }
        Ok(Self {
            label: label.to_string(),
            time,
            estimate,
            truth: all_truth.then_some(truth),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&label, &text)
    }

    fn score(&self) -> Option<ScorePair> {
        self.truth.as_ref().and_then(|t| ScorePair::score(&self.estimate, t).ok())
    }
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders one truth line (from the first series that has one) and every
/// forecast, with a legend carrying PCC/RMSE where truth exists.
pub fn render_svg(series: &[ForecastSeries], title: &str) -> Result<String> {
    if series.is_empty() {
        bail!("nothing to plot");
    }
    let truth = series.iter().find_map(|s| s.truth.as_ref().map(|t| (&s.time, t)));
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.time.iter().copied()).collect();
    let mut ys: Vec<f64> = series.iter().flat_map(|s| s.estimate.iter().copied()).collect();
    if let Some((t, v)) = truth {
        xs.extend(t);
        ys.extend(v);
    }
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (mut y0, mut y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if !(x0.is_finite() && y0.is_finite()) {
        bail!("non-finite values in plot input");
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    y0 -= pad;
    y1 += pad;
    let (left, right, top, bottom) = MARGIN;
    let (pw, ph) = (WIDTH - left - right, HEIGHT - top - bottom);
    let sx = |x: f64| left + if x1 > x0 { (x - x0) / (x1 - x0) * pw } else { pw / 2.0 };
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;
    let path = |t: &[f64], v: &[f64]| -> String {
        t.iter()
            .zip(v)
            .enumerate()
            .map(|(k, (&x, &y))| format!("{}{:.2},{:.2}", if k == 0 { "M" } else { " L" }, sx(x), sy(y)))
            .collect()
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 18.0,
            fmt_num(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            fmt_num(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">time index</text>"#,
        left + pw / 2.0,
        HEIGHT - 10.0
    );

    let legend_x = left + pw + 15.0;
    let mut legend_y = top + 10.0;
    if let Some((t, v)) = truth {
        let _ = writeln!(
            svg,
            r##"<path d="{}" fill="none" stroke="#000" stroke-width="2"/>"##,
            path(t, v)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{legend_x}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="#000" stroke-width="2"/><text x="{}" y="{}">truth</text>"##,
            legend_x + 20.0,
            legend_x + 26.0,
            legend_y + 4.0
        );
        legend_y += 22.0;
    }
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let dash = if k >= COLORS.len() { r#" stroke-dasharray="6 3""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            path(&s.time, &s.estimate)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{legend_x}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
            legend_x + 20.0,
            legend_x + 26.0,
            legend_y + 4.0,
            escape(&s.label)
        );
        if let Some(score) = s.score() {
            let pcc = score.pcc.map(fmt_num).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                svg,
                r##"<text x="{}" y="{}" fill="#444">PCC {pcc}, RMSE {}</text>"##,
                legend_x + 26.0,
                legend_y + 18.0,
                fmt_num(score.rmse)
            );
            legend_y += 14.0;
        }
        legend_y += 22.0;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
