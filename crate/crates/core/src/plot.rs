//! Minimal SVG scatter plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

pub const VIEWBOX: f64 = 600.0;
const MARGIN: f64 = 30.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub fn class_color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

/// Render points as a 600x600 scatter, scaled to the data range with equal
/// aspect, one colour per label.
pub fn scatter_svg(points: ArrayView2<'_, f64>, labels: &[usize], title: &str) -> Result<String> {
    if points.ncols() != 2 || points.nrows() != labels.len() {
        return Err(Error::Usage(format!(
            "scatter needs n x 2 points and n labels, got {:?} and {}",
            points.dim(),
            labels.len()
        )));
    }
    let finite: Vec<[f64; 2]> = points
        .outer_iter()
        .map(|r| [r[0], r[1]])
        .filter(|p| p[0].is_finite() && p[1].is_finite())
        .collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &finite {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    if finite.is_empty() {
        (lo, hi) = ([-1.0; 2], [1.0; 2]);
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let scale = (VIEWBOX - 2.0 * MARGIN) / span;
    let map = |p: [f64; 2]| {
        (VIEWBOX / 2.0 + (p[0] - center[0]) * scale, VIEWBOX / 2.0 - (p[1] - center[1]) * scale)
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {v} {v}" width="{v}" height="{v}">"#,
        v = VIEWBOX
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" font-size="14" font-family="sans-serif">{}</text>"#, MARGIN, escape(title));
    for (row, &label) in points.outer_iter().zip(labels) {
        if !(row[0].is_finite() && row[1].is_finite()) {
            continue;
        }
        let (x, y) = map([row[0], row[1]]);
        let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="{}" fill-opacity="0.6"/>"#, class_color(label));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_scatter(path: &Path, points: ArrayView2<'_, f64>, labels: &[usize], title: &str) -> Result<()> {
    fs::write(path, scatter_svg(points, labels, title)?)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
