//! Minimal SVG charts: box plots, scatter and line plots, error bars and a
//! thresholded matrix heatmap.

use std::fmt::Write;

const WIDTH: f64 = 680.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

/// `(x, mean, std)` triples of one error-bar curve.
pub type ErrorBars = Vec<(f64, f64, f64)>;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    scale: Scale,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, scale: Scale) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (scale == Scale::Linear || *v > 0.0)) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = if scale == Scale::Log {
                (0.1, 10.0)
            } else {
                (0.0, 1.0)
            };
        }
        match scale {
            Scale::Linear => {
                let pad = if hi > lo {
                    0.05 * (hi - lo)
                } else {
                    lo.abs().max(1.0) * 0.1
                };
                Self {
                    lo: lo - pad,
                    hi: hi + pad,
                    scale,
                }
            }
            Scale::Log => {
                let (a, b) = (lo.log10().floor(), hi.log10().ceil());
                let b = if b <= a { a + 1.0 } else { b };
                Self {
                    lo: 10f64.powf(a),
                    hi: 10f64.powf(b),
                    scale,
                }
            }
        }
    }

    fn t(&self, v: f64) -> f64 {
        match self.scale {
            Scale::Linear => (v - self.lo) / (self.hi - self.lo),
            Scale::Log => (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10()),
        }
    }

    fn usable(&self, v: f64) -> bool {
        v.is_finite() && (self.scale == Scale::Linear || v > 0.0)
    }

    fn ticks(&self) -> Vec<f64> {
        match self.scale {
            Scale::Log => {
                let (a, b) = (
                    self.lo.log10().round() as i32,
                    self.hi.log10().round() as i32,
                );
                (a..=b).map(|e| 10f64.powi(e)).collect()
            }
            Scale::Linear => {
                let span = self.hi - self.lo;
                let raw = span / 5.0;
                let mag = 10f64.powf(raw.log10().floor());
                let step = [1.0, 2.0, 5.0, 10.0]
                    .iter()
                    .map(|m| m * mag)
                    .find(|s| span / s <= 6.0)
                    .unwrap_or(10.0 * mag);
                let first = (self.lo / step).ceil() as i64;
                let last = (self.hi / step).floor() as i64;
                (first..=last).map(|i| i as f64 * step).collect()
            }
        }
    }
}

fn fmt_tick(v: f64, scale: Scale) -> String {
    if scale == Scale::Log {
        return format!("1e{}", v.log10().round() as i32);
    }
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

struct Frame {
    x: Axis,
    y: Axis,
    out: String,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, x: Axis, y: Axis) -> Self {
        Self::with_ticks(title, x_label, y_label, x, y, true)
    }

    fn with_ticks(
        title: &str,
        x_label: &str,
        y_label: &str,
        x: Axis,
        y: Axis,
        x_ticks: bool,
    ) -> Self {
        let mut out = String::new();
        let _ = write!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        out.push('\n');
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
            escape(title)
        );
        let mut f = Self { x, y, out };
        f.axes(x_label, y_label, x_ticks);
        f
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + self.x.t(v) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - self.y.t(v) * (HEIGHT - TOP - BOTTOM)
    }

    fn axes(&mut self, x_label: &str, y_label: &str, x_ticks: bool) {
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
        let _ = writeln!(
            self.out,
            r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y0 - y1
        );
        let xt = if x_ticks { self.x.ticks() } else { Vec::new() };
        for t in xt {
            let p = self.px(t);
            let _ = writeln!(
                self.out,
                r#"<line x1="{p:.2}" y1="{y0}" x2="{p:.2}" y2="{}" stroke="black"/><text x="{p:.2}" y="{}" text-anchor="middle">{}</text>"#,
                y0 + 5.0,
                y0 + 18.0,
                fmt_tick(t, self.x.scale)
            );
        }
        for t in self.y.ticks() {
            let p = self.py(t);
            let _ = writeln!(
                self.out,
                r##"<line x1="{}" y1="{p:.2}" x2="{x0}" y2="{p:.2}" stroke="black"/><line x1="{x0}" y1="{p:.2}" x2="{x1}" y2="{p:.2}" stroke="#e0e0e0"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                x0 - 5.0,
                x0 - 8.0,
                p + 4.0,
                fmt_tick(t, self.y.scale)
            );
        }
        let _ = writeln!(
            self.out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 14.0,
            escape(x_label)
        );
        let _ = writeln!(
            self.out,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }

    fn legend(&mut self, labels: &[(String, &str)]) {
        for (i, (label, color)) in labels.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = WIDTH - RIGHT + 12.0;
            let _ = writeln!(
                self.out,
                r#"<rect x="{x}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
                y - 9.0,
                x + 18.0,
                y + 1.0,
                escape(label)
            );
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// One box per group: quartile box, median line, min/max whiskers.
pub fn box_plot(
    title: &str,
    y_label: &str,
    groups: &[(String, Vec<f64>)],
    y_scale: Scale,
) -> String {
    let x = Axis {
        lo: 0.0,
        hi: groups.len().max(1) as f64,
        scale: Scale::Linear,
    };
    let y = Axis::fit(groups.iter().flat_map(|(_, v)| v.iter().copied()), y_scale);
    let mut f = Frame::with_ticks(title, "", y_label, x, y, false);
    for (i, (label, values)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut v: Vec<f64> = values.iter().copied().filter(|&v| y.usable(v)).collect();
        let cx = f.px(i as f64 + 0.5);
        let _ = writeln!(
            f.out,
            r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 34.0,
            escape(label)
        );
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let (lo, q1, med, q3, hi) = (
            v[0],
            quantile(&v, 0.25),
            quantile(&v, 0.5),
            quantile(&v, 0.75),
            v[v.len() - 1],
        );
        let half = 0.18 * (f.px(1.0) - f.px(0.0));
        let _ = writeln!(
            f.out,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="{color}"/>"#,
            f.py(lo),
            f.py(hi)
        );
        let _ = writeln!(
            f.out,
            r#"<rect class="box" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.3" stroke="{color}"/>"#,
            cx - half,
            f.py(q3),
            2.0 * half,
            (f.py(q1) - f.py(q3)).max(0.5)
        );
        let _ = writeln!(
            f.out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            f.py(med),
            cx + half,
            f.py(med)
        );
        for p in &v {
            let _ = writeln!(
                f.out,
                r#"<circle cx="{cx:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                f.py(*p)
            );
        }
    }
    f.finish()
}

/// Markers only; `reference` draws a cross at a known point.
pub fn scatter(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    reference: Option<(f64, f64)>,
) -> String {
    let all = || {
        series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .chain(reference)
    };
    let x = Axis::fit(all().map(|p| p.0), Scale::Linear);
    let y = Axis::fit(all().map(|p| p.1), Scale::Linear);
    let mut f = Frame::new(title, x_label, y_label, x, y);
    let mut legend = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        legend.push((s.label.clone(), color));
        for &(a, b) in s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
        {
            let _ = writeln!(
                f.out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}" fill-opacity="0.7"/>"#,
                f.px(a),
                f.py(b)
            );
        }
    }
    if let Some((a, b)) = reference {
        let (px, py) = (f.px(a), f.py(b));
        let _ = writeln!(
            f.out,
            r#"<path d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="black" stroke-width="2"/>"#,
            px - 6.0,
            py - 6.0,
            px + 6.0,
            py + 6.0,
            px - 6.0,
            py + 6.0,
            px + 6.0,
            py - 6.0
        );
        legend.push(("true value".into(), "black"));
    }
    f.legend(&legend);
    f.finish()
}

fn polyline(f: &Frame, points: &[(f64, f64)], color: &str, dashed: bool) -> String {
    let coords: Vec<String> = points
        .iter()
        .filter(|p| f.x.usable(p.0) && f.y.usable(p.1))
        .map(|&(a, b)| format!("{:.2},{:.2}", f.px(a), f.py(b)))
        .collect();
    let dash = if dashed {
        r#" stroke-dasharray="6 4""#
    } else {
        ""
    };
    format!(
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
        coords.join(" ")
    )
}

pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    x_scale: Scale,
    y_scale: Scale,
) -> String {
    let x = Axis::fit(
        series.iter().flat_map(|s| s.points.iter().map(|p| p.0)),
        x_scale,
    );
    let y = Axis::fit(
        series.iter().flat_map(|s| s.points.iter().map(|p| p.1)),
        y_scale,
    );
    let mut f = Frame::new(title, x_label, y_label, x, y);
    let mut legend = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let line = polyline(&f, &s.points, color, s.dashed);
        f.out.push_str(&line);
        f.out.push('\n');
        if !s.label.is_empty() {
            legend.push((s.label.clone(), color));
        }
    }
    f.legend(&legend);
    f.finish()
}

/// Mean curves with `mean +- std` bars; points are `(x, mean, std)`.
pub fn error_bar_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, ErrorBars)],
    x_scale: Scale,
    y_scale: Scale,
) -> String {
    let ys = series
        .iter()
        .flat_map(|(_, p)| p.iter().flat_map(|&(_, m, s)| [m, m + s, m - s]));
    let x = Axis::fit(
        series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)),
        x_scale,
    );
    let y = Axis::fit(ys, y_scale);
    let mut f = Frame::new(title, x_label, y_label, x, y);
    let mut legend = Vec::new();
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        legend.push((label.clone(), color));
        let mean: Vec<(f64, f64)> = points.iter().map(|&(a, m, _)| (a, m)).collect();
        let line = polyline(&f, &mean, color, false);
        f.out.push_str(&line);
        f.out.push('\n');
        for &(a, m, s) in points.iter().filter(|p| x.usable(p.0) && y.usable(p.1)) {
            // a lower bar end at or below zero is clipped on log axes
            let lo = if y.usable(m - s) { m - s } else { y.lo };
            let (px, top, bottom) = (f.px(a), f.py(m + s), f.py(lo));
            let _ = writeln!(
                f.out,
                r#"<path class="errbar" d="M{px:.2},{top:.2}L{px:.2},{bottom:.2}M{:.2},{top:.2}L{:.2},{top:.2}M{:.2},{bottom:.2}L{:.2},{bottom:.2}" stroke="{color}"/><circle cx="{px:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px - 4.0,
                px + 4.0,
                px - 4.0,
                px + 4.0,
                f.py(m)
            );
        }
    }
    f.legend(&legend);
    f.finish()
}

/// Square heatmap of a matrix given row by row. Entries with `|v| < zero_threshold`
/// form the black "zero" class; the rest are shaded by `log10 |v|`.
pub fn heatmap(
    title: &str,
    rows: usize,
    cols: usize,
    data: &[f64],
    zero_threshold: f64,
    split: Option<usize>,
) -> String {
    let side = (HEIGHT - TOP - BOTTOM).min(WIDTH - LEFT - RIGHT);
    let cell = side / rows.max(cols).max(1) as f64;
    let logs: Vec<f64> = data
        .iter()
        .filter(|v| v.abs() >= zero_threshold && v.is_finite())
        .map(|v| v.abs().log10())
        .collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + side / 2.0,
        escape(title)
    );
    for r in 0..rows {
        for c in 0..cols {
            let v = data[r * cols + c];
            let (class, color) = if v.abs() < zero_threshold {
                ("zero", "#000000".to_string())
            } else {
                let t = if hi > lo {
                    (v.abs().log10() - lo) / (hi - lo)
                } else {
                    1.0
                };
                ("nonzero", shade(t))
            };
            let _ = writeln!(
                out,
                r#"<rect class="{class}" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{color}"><title>({r},{c}) {v:.3e}</title></rect>"#,
                LEFT + c as f64 * cell,
                TOP + r as f64 * cell,
                cell,
                cell
            );
        }
    }
    if let Some(k) = split.filter(|&k| k > 0 && k < rows.max(cols)) {
        let p = k as f64 * cell;
        let _ = writeln!(
            out,
            r#"<path d="M{:.3},{:.3}L{:.3},{:.3}M{:.3},{:.3}L{:.3},{:.3}" stroke="white" stroke-width="1.5"/>"#,
            LEFT + p,
            TOP,
            LEFT + p,
            TOP + rows as f64 * cell,
            LEFT,
            TOP + p,
            LEFT + cols as f64 * cell,
            TOP + p
        );
    }
    let lx = LEFT + side + 20.0;
    let _ = writeln!(
        out,
        r#"<rect x="{lx}" y="{TOP}" width="14" height="14" fill="black"/><text x="{}" y="{}">|v| &lt; {zero_threshold:e}</text>"#,
        lx + 20.0,
        TOP + 11.0
    );
    if logs.is_empty() {
        let _ = writeln!(
            out,
            r#"<text x="{lx}" y="{}">all entries zero-class</text>"#,
            TOP + 36.0
        );
    } else {
        for (i, t) in [1.0, 0.5, 0.0].iter().enumerate() {
            let y = TOP + 30.0 + 20.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{lx}" y="{y}" width="14" height="14" fill="{}"/><text x="{}" y="{}">|v| = 1e{:.1}</text>"#,
                shade(*t),
                lx + 20.0,
                y + 11.0,
                lo + t * (hi - lo)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

// dark blue -> yellow
fn shade(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(40.0, 250.0),
        lerp(60.0, 230.0),
        lerp(160.0, 40.0)
    )
}
