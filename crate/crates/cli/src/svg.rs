//! Minimal hand-written SVG for log-log rate charts.
//!
//! Output depends only on the input data: no timestamps, ids or map
//! iteration order, so the bytes are reproducible.

use std::fmt::Write;

use adaptive_lqr::RateFit;

const PANEL_W: f64 = 460.0;
const PANEL_H: f64 = 360.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 90.0;

pub struct Series {
    pub label: String,
    pub color: &'static str,
    /// `(T, value)` with both coordinates positive.
    pub points: Vec<(f64, f64)>,
    pub fit: Option<RateFit>,
}

pub struct Panel {
    pub title: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

struct Axes {
    x0: f64,
    y0: f64,
    lx: (f64, f64),
    ly: (f64, f64),
}

impl Axes {
    fn width() -> f64 {
        PANEL_W - MARGIN_L - MARGIN_R
    }

    fn height() -> f64 {
        PANEL_H - MARGIN_T - MARGIN_B
    }

    fn px(&self, t: f64) -> f64 {
        self.x0 + MARGIN_L + (t.log2() - self.lx.0) / (self.lx.1 - self.lx.0) * Self::width()
    }

    fn py(&self, v: f64) -> f64 {
        self.y0 + MARGIN_T + (self.ly.1 - v.log10()) / (self.ly.1 - self.ly.0) * Self::height()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn log_range(values: impl Iterator<Item = f64>, log: fn(f64) -> f64) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| *v > 0.0 && v.is_finite()) {
        lo = lo.min(log(v));
        hi = hi.max(log(v));
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let (lo, hi) = (lo.floor(), hi.ceil());
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

fn slope_text(fit: &Option<RateFit>) -> String {
    match fit {
        Some(RateFit {
            slope,
            stderr: Some(e),
            ..
        }) => format!("slope {slope:.3} ± {e:.3}"),
        Some(f) => format!("slope {:.3}", f.slope),
        None => "no fit".to_string(),
    }
}

fn render_panel(out: &mut String, panel: &Panel, x0: f64) {
    let all_t = panel.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let lx = log_range(all_t, f64::log2);
    let all_v = panel.series.iter().flat_map(|s| {
        let fitted = s.fit.iter().flat_map(|f| {
            let ends = [
                s.points.first().map(|p| f.predict(p.0)),
                s.points.last().map(|p| f.predict(p.0)),
            ];
            ends.into_iter().flatten()
        });
        s.points.iter().map(|p| p.1).chain(fitted)
    });
    let ly = log_range(all_v, f64::log10);
    let ax = Axes { x0, y0: 0.0, lx, ly };
    let (left, right) = (x0 + MARGIN_L, x0 + MARGIN_L + Axes::width());
    let (top, bottom) = (MARGIN_T, MARGIN_T + Axes::height());

    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (left + right) / 2.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
        Axes::width(),
        Axes::height()
    );
    for e in (lx.0 as i64)..=(lx.1 as i64) {
        let x = ax.px(2f64.powi(e as i32));
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/>"##,
            bottom + 5.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="11">2^{e}</text>"#,
            bottom + 18.0
        );
    }
    for e in (ly.0 as i64)..=(ly.1 as i64) {
        let y = ax.py(10f64.powi(e as i32));
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{left:.2}" y2="{y:.2}" stroke="#333"/>"##,
            left - 5.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">1e{e}</text>"#,
            left - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">horizon T</text>"#,
        (left + right) / 2.0,
        bottom + 36.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        x0 + 18.0,
        (top + bottom) / 2.0,
        x0 + 18.0,
        (top + bottom) / 2.0,
        escape(&panel.y_label)
    );

    for (i, s) in panel.series.iter().enumerate() {
        for &(t, v) in s.points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0) {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{}"/>"#,
                ax.px(t),
                ax.py(v),
                s.color
            );
        }
        if let (Some(f), Some(first), Some(last)) = (&s.fit, s.points.first(), s.points.last()) {
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1.5"/>"#,
                ax.px(first.0),
                ax.py(f.predict(first.0)),
                ax.px(last.0),
                ax.py(f.predict(last.0)),
                s.color
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="{}">{}: {}</text>"#,
            left,
            bottom + 56.0 + 16.0 * i as f64,
            s.color,
            escape(&s.label),
            escape(&slope_text(&s.fit))
        );
    }
}

/// Panels are laid out left to right.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        let _ = writeln!(out, "<g>");
        render_panel(&mut out, panel, PANEL_W * i as f64);
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    out
}
