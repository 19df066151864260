//! Minimal deterministic SVG line charts (one x axis, up to two y axes).

use std::fmt::Write as _;

pub const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

const LEFT: f64 = 70.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn frac(&self, v: f64) -> f64 {
        let (a, b, v) = if self.log {
            (self.lo.log10(), self.hi.log10(), v.max(self.lo).log10())
        } else {
            (self.lo, self.hi, v)
        };
        if b > a {
            (v - a) / (b - a)
        } else {
            0.5
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let mut out = Vec::new();
            let mut e = self.lo.log10().floor() as i32;
            while 10f64.powi(e) <= self.hi * 1.000_001 {
                let v = 10f64.powi(e);
                if v >= self.lo * 0.999_999 {
                    out.push(v);
                }
                e += 1;
            }
            if out.len() < 2 {
                out = vec![self.lo, self.hi];
            }
            return out;
        }
        (0..=5).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 5.0).collect()
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(0.01..1000.0).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub struct Canvas {
    w: f64,
    h: f64,
    body: String,
    x: Axis,
    yl: Axis,
    yr: Option<Axis>,
    labels: (String, String, String),
}

impl Canvas {
    pub fn new(w: f64, h: f64, title: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(body, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            w / 2.0,
            esc(title)
        );
        let unit = Axis { lo: 0.0, hi: 1.0, log: false };
        Canvas {
            w,
            h,
            body,
            x: unit,
            yl: unit,
            yr: None,
            labels: Default::default(),
        }
    }

    pub fn set_x(&mut self, lo: f64, hi: f64, label: &str) {
        self.x = Axis { lo, hi, log: false };
        self.labels.0 = label.into();
    }

    /// Logarithmic x axis; `lo` must be positive.
    pub fn set_x_log(&mut self, lo: f64, hi: f64, label: &str) {
        self.x = Axis { lo, hi, log: true };
        self.labels.0 = label.into();
    }

    pub fn set_y_left(&mut self, lo: f64, hi: f64, label: &str) {
        self.yl = Axis { lo, hi, log: false };
        self.labels.1 = label.into();
    }

    pub fn set_y_right(&mut self, lo: f64, hi: f64, label: &str) {
        self.yr = Some(Axis { lo, hi, log: false });
        self.labels.2 = label.into();
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + self.x.frac(v) * (self.w - LEFT - RIGHT)
    }

    fn py(&self, axis: &Axis, v: f64) -> f64 {
        self.h - BOTTOM - axis.frac(v) * (self.h - TOP - BOTTOM)
    }

    pub fn axes(&mut self) {
        let (x0, x1, y0, y1) = (LEFT, self.w - RIGHT, self.h - BOTTOM, TOP);
        let mut s = String::new();
        let _ = writeln!(s, r##"<rect x="{x0}" y="{y1}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##, x1 - x0, y0 - y1);
        for t in self.x.ticks() {
            let x = self.px(t);
            let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{y0}" x2="{x:.1}" y2="{:.1}" stroke="#333"/>"##, y0 + 5.0);
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + 18.0, fmt_tick(t));
        }
        for t in self.yl.ticks() {
            let y = self.py(&self.yl, t);
            let _ = writeln!(s, r##"<line x1="{:.1}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="#333"/>"##, x0 - 5.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 8.0, y + 4.0, fmt_tick(t));
        }
        if let Some(yr) = self.yr {
            for t in yr.ticks() {
                let y = self.py(&yr, t);
                let _ = writeln!(s, r##"<line x1="{x1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#333"/>"##, x1 + 5.0);
                let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x1 + 8.0, y + 4.0, fmt_tick(t));
            }
            let _ = writeln!(
                s,
                r#"<text transform="translate({:.1},{:.1}) rotate(90)" text-anchor="middle">{}</text>"#,
                self.w - 12.0,
                (y0 + y1) / 2.0,
                esc(&self.labels.2)
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, self.h - 12.0, esc(&self.labels.0));
        let _ = writeln!(
            s,
            r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (y0 + y1) / 2.0,
            esc(&self.labels.1)
        );
        self.body.push_str(&s);
    }

    fn points(&self, axis: &Axis, pts: &[(f64, f64)]) -> String {
        pts.iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(axis, y)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Filled translucent polygon in left-axis coordinates.
    pub fn band(&mut self, pts: &[(f64, f64)], color: &str) {
        let p = self.points(&self.yl, pts);
        let _ = writeln!(self.body, r#"<polygon points="{p}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#);
    }

    pub fn polyline_left(&mut self, pts: &[(f64, f64)], color: &str, markers: bool) {
        let axis = self.yl;
        self.polyline(&axis, pts, color, markers, "");
    }

    pub fn polyline_right(&mut self, pts: &[(f64, f64)], color: &str, markers: bool) {
        let axis = self.yr.unwrap_or(self.yl);
        self.polyline(&axis, pts, color, markers, r#" stroke-dasharray="6 3""#);
    }

    fn polyline(&mut self, axis: &Axis, pts: &[(f64, f64)], color: &str, markers: bool, extra: &str) {
        let p = self.points(axis, pts);
        let _ = writeln!(self.body, r#"<polyline points="{p}" fill="none" stroke="{color}" stroke-width="2"{extra}/>"#);
        if markers {
            for &(x, y) in pts {
                let _ = writeln!(
                    self.body,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    self.px(x),
                    self.py(axis, y)
                );
            }
        }
    }

    /// Vertical error bar in left-axis coordinates.
    pub fn error_bar(&mut self, x: f64, lo: f64, hi: f64, color: &str) {
        let (px, a, b) = (self.px(x), self.py(&self.yl, lo), self.py(&self.yl, hi));
        let _ = writeln!(self.body, r#"<line x1="{px:.2}" y1="{a:.2}" x2="{px:.2}" y2="{b:.2}" stroke="{color}"/>"#);
    }

    pub fn legend(&mut self, slot: usize, label: &str, color: &str) {
        let x = LEFT + 12.0;
        let y = TOP + 16.0 + 16.0 * slot as f64;
        let _ = writeln!(
            self.body,
            r#"<line x1="{x}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 4.0,
            x + 18.0,
            y - 4.0,
            x + 24.0,
            esc(label)
        );
    }

    /// Text in the lower-right corner of the plot area.
    pub fn note(&mut self, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            self.w - RIGHT - 8.0,
            self.h - BOTTOM - 10.0,
            esc(text)
        );
    }

    pub fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}
