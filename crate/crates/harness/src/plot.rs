//! Deterministic SVG learning curves: a mean line over a shaded band.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{HarnessError, Result};
use crate::runner::{parse_error, write_text, AggregateRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 44.0;
const TICKS: usize = 5;
const PALETTE: [&str; 9] = [
    "#1f77b4", "#2ca02c", "#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Series {
    /// Raw per-episode mean with the two-standard-deviation band.
    pub fn raw(label: &str, rows: &[AggregateRow]) -> Self {
        Self {
            label: label.to_string(),
            x: rows.iter().map(|r| r.episode as f64).collect(),
            mean: rows.iter().map(|r| r.mean_return).collect(),
            lower: rows.iter().map(|r| r.lower_2sd).collect(),
            upper: rows.iter().map(|r| r.upper_2sd).collect(),
        }
    }

    /// Trailing-window mean with a two-standard-deviation band across seeds.
    pub fn smoothed(label: &str, rows: &[AggregateRow]) -> Self {
        Self {
            label: label.to_string(),
            x: rows.iter().map(|r| r.episode as f64).collect(),
            mean: rows.iter().map(|r| r.trailing20_mean).collect(),
            lower: rows.iter().map(|r| r.trailing20_mean - 2.0 * r.trailing20_sd).collect(),
            upper: rows.iter().map(|r| r.trailing20_mean + 2.0 * r.trailing20_sd).collect(),
        }
    }
}

#[derive(Deserialize)]
struct PlotRow {
    episode: f64,
    mean_return: f64,
    lower_2sd: f64,
    upper_2sd: f64,
}

/// Reads the raw mean and band columns of an aggregate CSV.
pub fn read_aggregate(path: &Path) -> Result<Series> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_error(path, e))?;
    let mut series = Series {
        label: path
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        x: Vec::new(),
        mean: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for result in reader.deserialize::<PlotRow>() {
        let row = result.map_err(|e| parse_error(path, e))?;
        series.x.push(row.episode);
        series.mean.push(row.mean_return);
        series.lower.push(row.lower_2sd);
        series.upper.push(row.upper_2sd);
    }
    if series.x.is_empty() {
        return Err(HarnessError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no data rows".into(),
        });
    }
    Ok(series)
}

pub fn emit_plot(csv_path: &Path, svg_path: &Path) -> Result<()> {
    let series = read_aggregate(csv_path)?;
    let title = series.label.clone();
    write_text(svg_path, &render_svg(&[series], &title))
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn finite(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Renders the series into one chart. The output depends only on the inputs.
pub fn render_svg(series: &[Series], title: &str) -> String {
    let (xlo, xhi) = finite(series.iter().flat_map(|s| s.x.iter().copied()));
    let (x0, x1) = padded(xlo, xhi);
    let (ylo, yhi) = finite(
        series
            .iter()
            .flat_map(|s| s.lower.iter().chain(&s.upper).chain(&s.mean).copied()),
    );
    let (y0, y1) = padded(ylo, yhi);
    let frame = Frame { x0, x1, y0, y1 };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );

    // axes and ticks
    let (left, right) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (top, bottom) = (MARGIN_TOP, HEIGHT - MARGIN_BOTTOM);
    let _ = writeln!(
        svg,
        r##"<path d="M{left:.2},{top:.2} L{left:.2},{bottom:.2} L{right:.2},{bottom:.2}" fill="none" stroke="#333"/>"##
    );
    for i in 0..=TICKS {
        let t = i as f64 / TICKS as f64;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let (px, py) = (frame.px(xv), frame.py(yv));
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.2}" y1="{bottom:.2}" x2="{px:.2}" y2="{:.2}" stroke="#333"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            bottom + 4.0,
            bottom + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{py:.2}" x2="{left:.2}" y2="{py:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            left - 4.0,
            left - 6.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">episode</text>"#,
        (left + right) / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">return</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<usize> = (0..s.x.len())
            .filter(|&j| s.mean[j].is_finite() && s.lower[j].is_finite() && s.upper[j].is_finite())
            .collect();
        if points.len() == 1 {
            let j = points[0];
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}" stroke-opacity="0.4" stroke-width="6"/>"#,
                frame.py(s.lower[j]),
                frame.py(s.upper[j]),
                x = frame.px(s.x[j])
            );
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                frame.px(s.x[j]),
                frame.py(s.mean[j])
            );
        } else if points.len() > 1 {
            let mut band = String::new();
            for &j in &points {
                let _ = write!(band, "{:.2},{:.2} ", frame.px(s.x[j]), frame.py(s.upper[j]));
            }
            for &j in points.iter().rev() {
                let _ = write!(band, "{:.2},{:.2} ", frame.px(s.x[j]), frame.py(s.lower[j]));
            }
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                band.trim_end()
            );
            let line: Vec<String> = points
                .iter()
                .map(|&j| format!("{:.2},{:.2}", frame.px(s.x[j]), frame.py(s.mean[j])))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                line.join(" ")
            );
        }
        if series.len() > 1 {
            let ly = top + 14.0 * i as f64 + 6.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="12" height="3" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                right - 120.0,
                ly - 3.0,
                right - 104.0,
                ly + 1.0,
                escape(&s.label)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick_label(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
