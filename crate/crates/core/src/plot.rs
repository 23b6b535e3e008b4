//! Static SVG charts for CDFs and cost comparisons.
//!
//! Output depends only on the inputs: coordinates are printed with a fixed
//! number of decimals and series keep their given order.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    EmptySeries,
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// One step polyline per series through `(value, fraction)` points.
    CdfLines,
    /// One bar per `(group index, value)` point, series side by side.
    GroupedBars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotLabels {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Bar group names, indexed by the x coordinate of bar points.
    pub groups: Vec<String>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        LEFT + (x - self.x0) / span * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        HEIGHT - BOTTOM - (y - self.y0) / span * (HEIGHT - TOP - BOTTOM)
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Points with a non-finite coordinate (diverged trials) are left out of the
/// drawing; the CSV outputs keep them.
pub fn render_svg(series: &[Series], kind: PlotKind, labels: &PlotLabels) -> Result<String, PlotError> {
    let series: Vec<Series> = series
        .iter()
        .map(|s| Series {
            name: s.name.clone(),
            points: s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect(),
        })
        .collect();
    let series = &series[..];
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(PlotError::EmptySeries);
    }
    let frame = match kind {
        PlotKind::CdfLines => {
            let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
            let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            Frame {
                x0: lo,
                x1: hi,
                y0: 0.0,
                y1: 1.0,
            }
        }
        PlotKind::GroupedBars => {
            let groups = series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.0 as usize + 1))
                .max()
                .unwrap_or(1)
                .max(labels.groups.len());
            let top = series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.1))
                .fold(0.0f64, f64::max);
            Frame {
                x0: 0.0,
                x1: groups as f64,
                y0: 0.0,
                y1: if top > 0.0 { top * 1.05 } else { 1.0 },
            }
        }
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        (WIDTH - RIGHT + LEFT) / 2.0,
        escape(&labels.title)
    );
    axes(&mut svg, &frame, kind, labels);
    match kind {
        PlotKind::CdfLines => cdf_lines(&mut svg, &frame, series),
        PlotKind::GroupedBars => grouped_bars(&mut svg, &frame, series),
    }
    legend(&mut svg, series);
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn axes(svg: &mut String, f: &Frame, kind: PlotKind, labels: &PlotLabels) {
    let (left, right) = (LEFT, WIDTH - RIGHT);
    let (top, bottom) = (TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        svg,
        r#"<path class="axis" d="M{left:.1} {top:.1} L{left:.1} {bottom:.1} L{right:.1} {bottom:.1}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let y = f.y0 + (f.y1 - f.y0) * f64::from(i) / 4.0;
        let py = f.py(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{py:.1}" x2="{left:.1}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            left - 4.0,
            left - 6.0,
            py + 4.0,
            tick(y)
        );
    }
    match kind {
        PlotKind::CdfLines => {
            for i in 0..=4 {
                let x = f.x0 + (f.x1 - f.x0) * f64::from(i) / 4.0;
                let px = f.px(x);
                let _ = writeln!(
                    svg,
                    r#"<line x1="{px:.1}" y1="{bottom:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                    bottom + 4.0,
                    bottom + 18.0,
                    tick(x)
                );
            }
        }
        PlotKind::GroupedBars => {
            for (g, name) in labels.groups.iter().enumerate() {
                let px = f.px(g as f64 + 0.5);
                let _ = writeln!(
                    svg,
                    r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                    bottom + 18.0,
                    escape(name)
                );
            }
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        HEIGHT - 12.0,
        escape(&labels.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(&labels.y_label)
    );
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn cdf_lines(svg: &mut String, f: &Frame, series: &[Series]) {
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let mut pts = String::new();
        let mut prev = 0.0;
        for &(x, y) in &s.points {
            let _ = write!(pts, "{:.2},{:.2} {:.2},{:.2} ", f.px(x), f.py(prev), f.px(x), f.py(y));
            prev = y;
        }
        let _ = writeln!(
            svg,
            r#"<polyline class="series" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            pts.trim_end(),
            color(i)
        );
    }
}

fn grouped_bars(svg: &mut String, f: &Frame, series: &[Series]) {
    let n = series.len() as f64;
    let slot = 0.8 / n;
    for (i, s) in series.iter().enumerate() {
        for &(g, v) in &s.points {
            let x = g.floor() + 0.1 + slot * i as f64;
            let (left, right) = (f.px(x), f.px(x + slot));
            let (top, bottom) = (f.py(v), f.py(0.0));
            let _ = writeln!(
                svg,
                r#"<rect class="bar" x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} {}</title></rect>"#,
                right - left,
                bottom - top,
                color(i),
                escape(&s.name),
                v
            );
        }
    }
}

fn legend(svg: &mut String, series: &[Series]) {
    let x = WIDTH - RIGHT + 16.0;
    for (i, s) in series.iter().enumerate() {
        let y = TOP + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect class="legend" x="{x:.1}" y="{y:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            color(i),
            x + 18.0,
            y + 10.0,
            escape(&s.name)
        );
    }
}

pub fn emit_svg_plot(
    series: &[Series],
    kind: PlotKind,
    labels: &PlotLabels,
    path: &Path,
) -> Result<(), PlotError> {
    let svg = render_svg(series, kind, labels)?;
    std::fs::write(path, svg).map_err(|source| PlotError::Io {
        path: path.display().to_string(),
        source,
    })
}
