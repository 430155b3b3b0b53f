//! Standalone SVG renderings of control charts and the root-cause facet view.
//!
//! Output is plain text built with fixed-precision formatting so identical
//! inputs give identical bytes.

use std::fmt::Write as _;

use chrono::NaiveDate;

use crate::charts::{EwmaChart, IrChart};

const WIDTH: f64 = 960.0;
const PANEL_HEIGHT: f64 = 260.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const PANEL_GAP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 36.0;

const STYLE: &str = "<style>\
.axis{stroke:#444;stroke-width:1}\
.grid{stroke:#ddd;stroke-width:1}\
.series{fill:none;stroke:#4a6fa5;stroke-width:1}\
.pt{fill:#4a6fa5}\
.flag{fill:#d62728;stroke:#7f0000;stroke-width:1}\
.late{fill:#ff7f0e}\
.center{stroke:#2ca02c;stroke-width:1.2}\
.limit{fill:none;stroke:#d62728;stroke-width:1.2;stroke-dasharray:6 4}\
.phase{stroke:#888;stroke-width:1;stroke-dasharray:2 3}\
text{font-family:sans-serif;font-size:12px;fill:#222}\
.title{font-size:15px;font-weight:bold}\
</style>";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// A plotting rectangle with a linear y scale and an index x scale.
struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    ymin: f64,
    ymax: f64,
    n: usize,
}

impl Panel {
    fn new(y0: f64, n: usize, values: impl Iterator<Item = f64>) -> Panel {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (-1.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 1.0, hi + 1.0);
        }
        let pad = 0.06 * (hi - lo);
        Panel {
            x0: MARGIN_LEFT,
            y0,
            w: WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
            h: PANEL_HEIGHT,
            ymin: lo - pad,
            ymax: hi + pad,
            n,
        }
    }

    fn x(&self, i: usize) -> f64 {
        if self.n <= 1 {
            self.x0 + self.w / 2.0
        } else {
            self.x0 + self.w * i as f64 / (self.n - 1) as f64
        }
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + self.h * (self.ymax - v) / (self.ymax - self.ymin)
    }

    fn frame(&self, out: &mut String, label: &str) {
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" class="axis"/>"#,
            self.x0, self.y0, self.w, self.h
        );
        for k in 0..=4 {
            let v = self.ymin + (self.ymax - self.ymin) * k as f64 / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" class="grid"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
                self.x0,
                self.x0 + self.w,
                self.x0 - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            self.x0,
            self.y0 - 8.0,
            escape(label)
        );
    }

    fn hline(&self, out: &mut String, v: f64, class: &str) {
        let y = self.y(v);
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" class="{class}"/>"#,
            self.x0,
            self.x0 + self.w
        );
    }

    fn vline(&self, out: &mut String, i: usize) {
        let x = self.x(i);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" class="phase"/>"#,
            self.y0,
            self.y0 + self.h
        );
    }

    fn polyline(&self, out: &mut String, values: &[f64], offset: usize, class: &str) {
        if values.is_empty() {
            return;
        }
        out.push_str(r#"<polyline points=""#);
        for (i, &v) in values.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{:.2},{:.2}", self.x(i + offset), self.y(v));
        }
        let _ = writeln!(out, r#"" class="{class}"/>"#);
    }

    /// Markers for every point; flagged ones are larger and drawn in red.
    fn markers(&self, out: &mut String, values: &[f64], flags: &[bool], offset: usize) {
        for (i, (&v, &f)) in values.iter().zip(flags).enumerate() {
            let (r, class) = if f { (4.0, "flag") } else { (1.8, "pt") };
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" class="{class}"/>"#,
                self.x(i + offset),
                self.y(v)
            );
        }
    }
}

fn open(out: &mut String, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    out.push_str(STYLE);
    out.push('\n');
    let _ = writeln!(
        out,
        r#"<rect width="100%" height="100%" fill="white"/><text x="{MARGIN_LEFT}" y="22" class="title">{}</text>"#,
        escape(title)
    );
}

/// Individuals panel above the moving-range panel. `phase_two_start` draws a
/// divider before that point index.
pub fn ir_svg(chart: &IrChart, title: &str, phase_two_start: Option<usize>) -> String {
    let n = chart.points.len();
    let values: Vec<f64> = chart.points.iter().map(|p| p.value).collect();
    let flags: Vec<bool> = chart.points.iter().map(|p| p.flag).collect();
    let mrs: Vec<f64> = chart.mr_points.iter().map(|p| p.value).collect();
    let mr_flags: Vec<bool> = chart.mr_points.iter().map(|p| p.flag).collect();
    let height = MARGIN_TOP + 2.0 * PANEL_HEIGHT + PANEL_GAP + MARGIN_BOTTOM;

    let mut out = String::new();
    open(&mut out, height, title);

    let ind = Panel::new(
        MARGIN_TOP,
        n,
        values.iter().copied().chain([chart.lcl, chart.ucl, chart.center_line]),
    );
    ind.frame(
        &mut out,
        &format!(
            "Individuals  CL {:.3}  LCL {:.3}  UCL {:.3}",
            chart.center_line, chart.lcl, chart.ucl
        ),
    );
    ind.hline(&mut out, chart.center_line, "center");
    ind.hline(&mut out, chart.lcl, "limit");
    ind.hline(&mut out, chart.ucl, "limit");
    ind.polyline(&mut out, &values, 0, "series");
    ind.markers(&mut out, &values, &flags, 0);

    let mr = Panel::new(
        MARGIN_TOP + PANEL_HEIGHT + PANEL_GAP,
        n,
        mrs.iter().copied().chain([0.0, chart.mr_ucl, chart.mr_bar]),
    );
    mr.frame(
        &mut out,
        &format!("Moving range  MR-bar {:.3}  UCL {:.3}", chart.mr_bar, chart.mr_ucl),
    );
    mr.hline(&mut out, chart.mr_bar, "center");
    mr.hline(&mut out, chart.mr_ucl, "limit");
    // the range between points i and i+1 sits at i+1
    mr.polyline(&mut out, &mrs, 1, "series");
    mr.markers(&mut out, &mrs, &mr_flags, 1);

    if let Some(k) = phase_two_start.filter(|&k| k > 0 && k < n) {
        ind.vline(&mut out, k);
        mr.vline(&mut out, k);
    }
    out.push_str("</svg>\n");
    out
}

/// EWMA statistic with its step-dependent limits.
pub fn ewma_svg(chart: &EwmaChart, title: &str, phase_two_start: Option<usize>) -> String {
    let n = chart.z.len();
    let height = MARGIN_TOP + PANEL_HEIGHT + MARGIN_BOTTOM;
    let mut out = String::new();
    open(&mut out, height, title);

    let lows: Vec<f64> = chart.limits.iter().map(|l| l.0).collect();
    let highs: Vec<f64> = chart.limits.iter().map(|l| l.1).collect();
    let panel = Panel::new(
        MARGIN_TOP,
        n,
        chart.z.iter().chain(&lows).chain(&highs).copied().chain([chart.center]),
    );
    panel.frame(
        &mut out,
        &format!(
            "EWMA  lambda {:.2}  L {:.2}  center {:.3}  sigma {:.3}",
            chart.lambda, chart.width, chart.center, chart.sigma
        ),
    );
    panel.hline(&mut out, chart.center, "center");
    panel.polyline(&mut out, &lows, 0, "limit");
    panel.polyline(&mut out, &highs, 0, "limit");
    panel.polyline(&mut out, &chart.z, 0, "series");
    panel.markers(&mut out, &chart.z, &chart.flags, 0);
    if let Some(k) = phase_two_start.filter(|&k| k > 0 && k < n) {
        panel.vline(&mut out, k);
    }
    out.push_str("</svg>\n");
    out
}

/// Values of one factor level, split by a date threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    pub level: String,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

/// Strip plot of standardized values per factor level, each level split
/// into lots up to and after `threshold` (all lots count as "before" when it
/// is absent). `highlight` levels get a tinted background.
pub fn facet_svg(
    factor: &str,
    facets: &[Facet],
    threshold: Option<NaiveDate>,
    highlight: &[String],
    title: &str,
) -> String {
    let height = MARGIN_TOP + PANEL_HEIGHT + MARGIN_BOTTOM + 24.0;
    let mut out = String::new();
    open(&mut out, height, title);

    let all = facets.iter().flat_map(|f| f.before.iter().chain(&f.after)).copied();
    let mut panel = Panel::new(MARGIN_TOP, 0, all.chain([0.0]));
    panel.n = facets.len().max(1);
    let label = match threshold {
        Some(d) => format!("{factor}: left half of each level <= {d}, right half > {d}"),
        None => format!("{factor}: all lots"),
    };
    panel.frame(&mut out, &label);
    panel.hline(&mut out, 0.0, "center");

    let slot = panel.w / panel.n as f64;
    for (k, f) in facets.iter().enumerate() {
        let left = panel.x0 + slot * k as f64;
        if highlight.iter().any(|h| h == &f.level) {
            let _ = writeln!(
                out,
                r##"<rect x="{left:.2}" y="{:.2}" width="{slot:.2}" height="{:.2}" fill="#fbe9e7"/>"##,
                panel.y0, panel.h
            );
        }
        if k > 0 {
            let _ = writeln!(
                out,
                r#"<line x1="{left:.2}" y1="{:.2}" x2="{left:.2}" y2="{:.2}" class="grid"/>"#,
                panel.y0,
                panel.y0 + panel.h
            );
        }
        let halves: [(&[f64], f64, &str); 2] = if threshold.is_some() {
            [(&f.before, 0.25, "pt"), (&f.after, 0.75, "late")]
        } else {
            [(&f.before, 0.5, "pt"), (&[], 0.75, "late")]
        };
        for (vals, centre, class) in halves {
            let cx = left + slot * centre;
            let spread = slot * 0.18;
            for (i, &v) in vals.iter().enumerate() {
                // deterministic jitter from the golden-ratio sequence
                let u = (i as f64 * 0.618_033_988_75).fract() * 2.0 - 1.0;
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2" class="{class}" fill-opacity="0.6"/>"#,
                    cx + u * spread,
                    panel.y(v)
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            left + slot / 2.0,
            panel.y0 + panel.h + 18.0,
            escape(&f.level)
        );
    }
    out.push_str("</svg>\n");
    out
}
