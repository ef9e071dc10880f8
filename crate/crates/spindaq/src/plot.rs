//! Tiny dependency-free SVG line plots for the CLI's `--plot` option.
//! Not a plotting library: one polyline per series, linear axes, no legend
//! beyond series color.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

const W: f64 = 900.0;
const H: f64 = 540.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
}

fn finite_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Write an SVG plot of one or more (x, y) series.
pub fn write_svg(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
) -> io::Result<()> {
    let (x0, x1) = finite_range(series.iter().flat_map(|s| s.x.iter().copied()));
    let (y0, y1) = finite_range(series.iter().flat_map(|s| s.y.iter().copied()));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )?;
    writeln!(w, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(
        w,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    )?;
    writeln!(
        w,
        r#"<text x="{}" y="28" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    )?;
    writeln!(
        w,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        W / 2.0,
        H - 14.0,
        xml_escape(x_label)
    )?;
    writeln!(
        w,
        r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    )?;
    // axis extremes as tick labels
    for (v, x, y, anchor) in [
        (x0, sx(x0), H - MARGIN + 18.0, "middle"),
        (x1, sx(x1), H - MARGIN + 18.0, "middle"),
        (y0, MARGIN - 6.0, sy(y0) + 4.0, "end"),
        (y1, MARGIN - 6.0, sy(y1) + 4.0, "end"),
    ] {
        writeln!(
            w,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{v:.6}</text>"#
        )?;
    }
    for (i, s) in series.iter().enumerate() {
        let mut points = String::new();
        for (&x, &y) in s.x.iter().zip(s.y) {
            if x.is_finite() && y.is_finite() {
                points.push_str(&format!("{:.2},{:.2} ", sx(x), sy(y)));
            }
        }
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            points.trim_end()
        )?;
    }
    writeln!(w, "</svg>")?;
    w.flush()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn produces_wellformed_svg_with_one_polyline_per_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.svg");
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, -1.0, 0.5];
        write_svg(&path, "t<1>", "x", "y", &[Series { x: &x, y: &y }, Series { x: &x, y: &x }])
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert_eq!(text.matches("<polyline").count(), 2);
        assert!(text.contains("t&lt;1&gt;"));
    }
}
