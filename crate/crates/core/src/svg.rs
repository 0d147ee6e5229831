//! Self-contained SVG line charts of cumulative regret.

use std::fmt::Write;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;
/// Polylines are thinned to at most this many vertices.
pub const MAX_POINTS: usize = 2000;

const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Indices kept when thinning `n` points: an even stride plus the last point.
fn thinned(n: usize) -> Vec<usize> {
    if n <= MAX_POINTS {
        return (0..n).collect();
    }
    let stride = n.div_ceil(MAX_POINTS - 1);
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if idx.last() != Some(&(n - 1)) {
        idx.push(n - 1);
    }
    idx
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders `series` against `t = 0, 1, …` on a fixed 800×500 canvas.
///
/// Output is a pure function of the input, so identical data produces
/// identical bytes. Non-finite values are dropped from the polylines.
pub fn regret_plot(title: &str, series: &[Series]) -> String {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((0.0_f64, 0.0_f64), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        // Flat data: centre the line in a unit band.
        lo -= 0.5;
        hi += 0.5;
    }
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let t_max = n.saturating_sub(1).max(1) as f64;
    let px = |t: f64| MARGIN_LEFT + plot_w * t / t_max;
    let py = |v: f64| MARGIN_TOP + plot_h * (hi - v) / (hi - lo);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );

    // Axes and ticks.
    let (x0, x1, y0, y1) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT, MARGIN_TOP, HEIGHT - MARGIN_BOTTOM);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1},{y0:.1} L{x0:.1},{y1:.1} L{x1:.1},{y1:.1}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let v = lo + f * (hi - lo);
        let y = py(v);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{x0:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"##,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            tick_label(v)
        );
        let t = f * t_max;
        let x = px(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{y1:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"##,
            y1 + 5.0,
            y1 + 18.0,
            t.round() as u64
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle">t</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {:.1})">cumulative regret</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts = String::new();
        for i in thinned(s.values.len()) {
            let v = s.values[i];
            if v.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", px(i as f64), py(v));
            }
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.trim_end()
        );
        let ly = y0 + 16.0 * k as f64 + 8.0;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            x0 + 10.0,
            x0 + 30.0,
            x0 + 35.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let svg = regret_plot(
            "demo",
            &[Series::new("a", vec![0.0, 1.0, 2.0]), Series::new("b", vec![0.0, -1.0, 0.5])],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">t</text>"));
        assert!(svg.contains("cumulative regret"));
        assert!(!svg.contains("href"));
    }

    #[test]
    fn flat_series_is_horizontal() {
        let svg = regret_plot("zero", &[Series::new("flat", vec![0.0; 50])]);
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        let ys: Vec<&str> = pts.split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
        assert!(ys.iter().all(|y| *y == ys[0]));
    }

    #[test]
    fn long_series_is_thinned_but_keeps_endpoints() {
        let idx = thinned(100_000);
        assert!(idx.len() <= MAX_POINTS);
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 99_999);
    }

    #[test]
    fn deterministic_and_escaped() {
        let s = [Series::new("x<y", vec![1.0, f64::NAN, 3.0])];
        assert_eq!(regret_plot("a&b", &s), regret_plot("a&b", &s));
        assert!(regret_plot("a&b", &s).contains("a&amp;b"));
        assert!(regret_plot("a&b", &s).contains("x&lt;y"));
    }
}
