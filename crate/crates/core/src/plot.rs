//! Minimal deterministic SVG charts.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Line chart body placed at `(ox, oy)`; used standalone and in panels.
fn line_group(out: &mut String, ox: f64, oy: f64, title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) {
    let (x0, x1) = range(points.iter().map(|p| p.0));
    let (y0, y1) = range(points.iter().map(|p| p.1));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| ox + LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| oy + TOP + ph - (y - y0) / (y1 - y0) * ph;
    let _ = writeln!(
        out,
        r#"<g><rect x="{:.2}" y="{:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#,
        ox + LEFT,
        oy + TOP
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
        ox + W / 2.0,
        oy + 20.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
        ox + LEFT + pw / 2.0,
        oy + H - 10.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        ox + 14.0,
        oy + TOP + ph / 2.0,
        ox + 14.0,
        oy + TOP + ph / 2.0,
        escape(ylabel)
    );
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{v:.4}</text>"#,
            ox + LEFT - 4.0,
            y + 4.0
        );
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{v}</text>"#,
            oy + TOP + ph + 14.0
        );
    }
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/></g>"#,
        path.join(" ")
    );
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let mut body = String::new();
    line_group(&mut body, 0.0, 0.0, title, xlabel, ylabel, points);
    document(W, H, &body)
}

/// Series laid out in a grid with `cols` columns.
pub fn panel(series: &[(&str, Vec<(f64, f64)>)], xlabel: &str, cols: usize) -> String {
    let cols = cols.max(1);
    let rows = series.len().div_ceil(cols).max(1);
    let mut body = String::new();
    for (i, (name, pts)) in series.iter().enumerate() {
        let ox = (i % cols) as f64 * W;
        let oy = (i / cols) as f64 * H;
        line_group(&mut body, ox, oy, name, xlabel, name, pts);
    }
    document(W * cols as f64, H * rows as f64, &body)
}

/// Grouped bars: one group per label, one bar per series.
pub fn bar_chart(title: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let width = (LEFT + RIGHT + 24.0 + labels.len() as f64 * 28.0 * series.len().max(1) as f64).max(W);
    let ph = H - TOP - BOTTOM;
    let max = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let colors = ["steelblue", "darkorange", "seagreen", "firebrick"];
    let mut body = String::new();
    let _ = writeln!(
        body,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let group_w = (width - LEFT - RIGHT) / labels.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, label) in labels.iter().enumerate() {
        let gx = LEFT + g as f64 * group_w + group_w * 0.1;
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0);
            let h = v / max * ph;
            let _ = writeln!(
                body,
                r#"<rect x="{:.2}" y="{:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{}"/>"#,
                gx + s as f64 * bar_w,
                TOP + ph - h,
                colors[s % colors.len()]
            );
        }
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            gx + group_w * 0.4,
            TOP + ph + 14.0,
            escape(label)
        );
    }
    for (s, (name, _)) in series.iter().enumerate() {
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{}">{}</text>"#,
            LEFT,
            H - 8.0 - (series.len() - 1 - s) as f64 * 12.0,
            colors[s % colors.len()],
            escape(name)
        );
    }
    let _ = writeln!(
        body,
        r#"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        TOP + ph,
        width - RIGHT,
        TOP + ph
    );
    document(width, H, &body)
}
