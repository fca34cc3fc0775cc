//! Minimal deterministic SVG charts.

use std::fmt::Write as _;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];

/// One named line of `(x, y)` points.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// One labelled bar group entry.
#[derive(Debug, Clone)]
pub struct Bar {
    pub label: String,
    pub value: f64,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    if hi - lo < 1e-12 {
        (lo, lo + 1.0)
    } else {
        (lo, hi + 0.05 * (hi - lo))
    }
}

fn header(out: &mut String, title: &str, panels: usize, legend_rows: usize) {
    let width = MARGIN + panels as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.0 * MARGIN + 16.0 * legend_rows as f64;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#,
        fmt(width),
        fmt(height),
        fmt(width),
        fmt(height)
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" font-size="14">{}</text>"#,
        fmt(MARGIN),
        escape(title)
    );
}

fn axes(out: &mut String, x0: f64, title: &str, (ylo, yhi): (f64, f64)) {
    let y0 = MARGIN;
    let _ = writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        fmt(x0),
        fmt(y0),
        fmt(PANEL_W),
        fmt(PANEL_H)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">{}</text>"#,
        fmt(x0),
        fmt(y0 - 6.0),
        escape(title)
    );
    for (frac, v) in [(0.0, ylo), (0.5, 0.5 * (ylo + yhi)), (1.0, yhi)] {
        let y = y0 + PANEL_H * (1.0 - frac);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#,
            fmt(x0 - 4.0),
            fmt(y + 4.0)
        );
    }
}

/// Side-by-side line panels sharing the series names.
pub fn line_chart(title: &str, x_label: &str, panels: &[(&str, Vec<Series>)]) -> String {
    let mut out = String::new();
    let names: Vec<&str> = panels
        .first()
        .map(|(_, s)| s.iter().map(|s| s.name.as_str()).collect())
        .unwrap_or_default();
    header(&mut out, title, panels.len(), names.len());
    for (i, (panel_title, series)) in panels.iter().enumerate() {
        let x0 = MARGIN + i as f64 * (PANEL_W + MARGIN);
        let (xlo, xhi) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (ylo, yhi) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        axes(&mut out, x0, panel_title, (ylo, yhi));
        let px = |x: f64| x0 + PANEL_W * (x - xlo) / (xhi - xlo);
        let py = |y: f64| MARGIN + PANEL_H * (1.0 - (y - ylo) / (yhi - ylo));
        for (k, s) in series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|&(x, y)| format!("{},{}", fmt(px(x)), fmt(py(y))))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (cx, cy) = p.split_once(',').expect("formatted point");
                let _ = writeln!(out, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            fmt(x0 + PANEL_W / 2.0),
            fmt(MARGIN + PANEL_H + 30.0),
            escape(x_label)
        );
        for tick in [xlo, xhi] {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle">{tick:.3}</text>"#,
                fmt(px(tick)),
                fmt(MARGIN + PANEL_H + 14.0)
            );
        }
    }
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Side-by-side bar panels, one bar per label.
pub fn bar_chart(title: &str, panels: &[(&str, Vec<Bar>)]) -> String {
    let mut out = String::new();
    let names: Vec<&str> = panels
        .first()
        .map(|(_, b)| b.iter().map(|b| b.label.as_str()).collect())
        .unwrap_or_default();
    header(&mut out, title, panels.len(), names.len());
    for (i, (panel_title, bars)) in panels.iter().enumerate() {
        let x0 = MARGIN + i as f64 * (PANEL_W + MARGIN);
        let (ylo, yhi) = range(bars.iter().map(|b| b.value));
        axes(&mut out, x0, panel_title, (ylo, yhi));
        let slot = PANEL_W / bars.len().max(1) as f64;
        for (k, b) in bars.iter().enumerate() {
            let v = if b.value.is_finite() { b.value } else { yhi };
            let h = PANEL_H * (v - ylo) / (yhi - ylo);
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
                fmt(x0 + k as f64 * slot + 0.15 * slot),
                fmt(MARGIN + PANEL_H - h),
                fmt(0.7 * slot),
                fmt(h),
                PALETTE[k % PALETTE.len()]
            );
        }
    }
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

fn legend(out: &mut String, names: &[&str]) {
    for (k, name) in names.iter().enumerate() {
        let y = 2.0 * MARGIN + PANEL_H + 16.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            fmt(MARGIN),
            fmt(y - 9.0),
            PALETTE[k % PALETTE.len()],
            fmt(MARGIN + 16.0),
            fmt(y),
            escape(name)
        );
    }
}
