//! A small deterministic SVG chart writer: line/scatter panels and grouped
//! bars, laid out side by side. Coordinates are printed with fixed precision
//! so identical data always yields identical bytes.

use std::fmt::Write as _;

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 360.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;
const TITLE_H: f64 = 28.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mark {
    Line,
    Dashed,
    Points,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>, mark: Mark) -> Self {
        Self {
            label: label.into(),
            points,
            mark,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Axis {
    pub label: String,
    pub log: bool,
}

impl Axis {
    pub fn linear(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            log: false,
        }
    }

    pub fn log(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            log: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Panel {
    pub title: String,
    pub x: Axis,
    pub y: Axis,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug)]
pub struct Bars {
    pub title: String,
    pub y_label: String,
    pub categories: Vec<String>,
    /// `(group label, one value per category)`.
    pub groups: Vec<(String, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub enum Chart {
    Xy(Panel),
    Bars(Bars),
}

fn n(v: f64) -> String {
    format!("{v:.2}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        return format!("{v:.0e}");
    }
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Maps data values to pixel offsets along one axis.
struct Scale {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Scale {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let t = if log { v.log10() } else { v };
            lo = lo.min(t);
            hi = hi.max(t);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            lo -= pad;
            hi += pad;
        } else if !log {
            let pad = (hi - lo) * 0.05;
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, log }
    }

    fn unit(&self, v: f64) -> f64 {
        let t = if self.log { v.log10() } else { v };
        (t - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            if b >= a {
                let stride = ((b - a) / 6 + 1) as usize;
                return (a..=b).step_by(stride).map(|e| 10f64.powi(e)).collect();
            }
            return vec![10f64.powf(self.lo), 10f64.powf(self.hi)];
        }
        (0..=4).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0).collect()
    }
}

fn usable(p: &(f64, f64), x: &Axis, y: &Axis) -> bool {
    p.0.is_finite() && p.1.is_finite() && (!x.log || p.0 > 0.0) && (!y.log || p.1 > 0.0)
}

fn frame(out: &mut String, ox: f64, title: &str, x_label: &str, y_label: &str) -> (f64, f64, f64, f64) {
    let (left, top) = (ox + MARGIN_L, TITLE_H + MARGIN_T);
    let (w, h) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
        n(ox + PANEL_W / 2.0),
        n(TITLE_H + 20.0),
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
        n(left),
        n(top),
        n(w),
        n(h)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        n(left + w / 2.0),
        n(top + h + 38.0),
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 {} {})">{}</text>"#,
        n(ox + 16.0),
        n(top + h / 2.0),
        n(ox + 16.0),
        n(top + h / 2.0),
        escape(y_label)
    );
    (left, top, w, h)
}

fn legend(out: &mut String, left: f64, top: f64, w: f64, entries: &[(String, &str, bool)]) {
    for (i, (label, colour, dashed)) in entries.iter().enumerate() {
        let y = top + 12.0 + 14.0 * i as f64;
        let x = left + w - 150.0;
        let dash = if *dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{colour}" stroke-width="2"{dash}/>"#,
            n(x),
            n(y - 4.0),
            n(x + 18.0),
            n(y - 4.0)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10">{}</text>"#,
            n(x + 22.0),
            n(y),
            escape(label)
        );
    }
}

fn xy(out: &mut String, ox: f64, panel: &Panel) {
    let (left, top, w, h) = frame(out, ox, &panel.title, &panel.x.label, &panel.y.label);
    let pts = || {
        panel
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|p| usable(p, &panel.x, &panel.y))
    };
    let sx = Scale::fit(pts().map(|p| p.0), panel.x.log);
    let sy = Scale::fit(pts().map(|p| p.1), panel.y.log);
    let px = |v: f64| left + sx.unit(v) * w;
    let py = |v: f64| top + h - sy.unit(v) * h;
    for t in sx.ticks() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            n(px(t)),
            n(top + h + 16.0),
            tick_label(t)
        );
    }
    for t in sy.ticks() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{}</text>"#,
            n(left - 4.0),
            n(py(t) + 3.0),
            tick_label(t)
        );
    }
    let mut entries = Vec::new();
    for (i, s) in panel.series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<_> = s.points.iter().filter(|p| usable(p, &panel.x, &panel.y)).collect();
        match s.mark {
            Mark::Line | Mark::Dashed => {
                let path: Vec<String> = points.iter().map(|p| format!("{},{}", n(px(p.0)), n(py(p.1)))).collect();
                let dash = if s.mark == Mark::Dashed { r#" stroke-dasharray="6 4""# } else { "" };
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"{dash}/>"#,
                    path.join(" ")
                );
            }
            Mark::Points => {
                for p in &points {
                    let _ = writeln!(
                        out,
                        r#"<circle cx="{}" cy="{}" r="3" fill="{colour}"/>"#,
                        n(px(p.0)),
                        n(py(p.1))
                    );
                }
            }
        }
        entries.push((s.label.clone(), colour, s.mark == Mark::Dashed));
    }
    legend(out, left, top, w, &entries);
}

fn bars(out: &mut String, ox: f64, chart: &Bars) {
    let (left, top, w, h) = frame(out, ox, &chart.title, "", &chart.y_label);
    let max = chart
        .groups
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let max = if max > 0.0 { max * 1.1 } else { 1.0 };
    let slot = w / chart.categories.len().max(1) as f64;
    let bar = slot * 0.8 / chart.groups.len().max(1) as f64;
    for (c, category) in chart.categories.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            n(left + slot * (c as f64 + 0.5)),
            n(top + h + 16.0),
            escape(category)
        );
        for (g, (_, values)) in chart.groups.iter().enumerate() {
            let v = values.get(c).copied().filter(|v| v.is_finite()).unwrap_or(0.0).max(0.0);
            let bh = v / max * h;
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
                n(left + slot * c as f64 + slot * 0.1 + bar * g as f64),
                n(top + h - bh),
                n(bar),
                n(bh),
                PALETTE[g % PALETTE.len()]
            );
        }
    }
    for i in 0..=4 {
        let t = max * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{}</text>"#,
            n(left - 4.0),
            n(top + h - h * i as f64 / 4.0 + 3.0),
            tick_label(t)
        );
    }
    let entries: Vec<_> = chart
        .groups
        .iter()
        .enumerate()
        .map(|(g, (label, _))| (label.clone(), PALETTE[g % PALETTE.len()], false))
        .collect();
    legend(out, left, top, w, &entries);
}

/// Renders the charts left to right under a common title.
pub fn render(title: &str, charts: &[Chart]) -> String {
    let width = PANEL_W * charts.len().max(1) as f64;
    let height = PANEL_H + TITLE_H;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif">"#,
        n(width),
        n(height),
        n(width),
        n(height)
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="16">{}</text>"#,
        n(width / 2.0),
        escape(title)
    );
    for (i, chart) in charts.iter().enumerate() {
        let ox = PANEL_W * i as f64;
        match chart {
            Chart::Xy(p) => xy(&mut out, ox, p),
            Chart::Bars(b) => bars(&mut out, ox, b),
        }
    }
    out.push_str("</svg>\n");
    out
}
