//! Grayscale PGM heatmaps and small static SVG plots.

use std::fmt::Write;

use bfd_core::geometry::{grid_color, RotationView};
use bfd_core::specialization::BarycentricPoint;
use bfd_core::Matrix;

/// Binary 8-bit PGM, min-max scaled to 0..255. A constant map renders as
/// mid-gray (128).
pub fn pgm(grid: &Matrix) -> Vec<u8> {
    let (h, w) = grid.shape();
    let vals = grid.as_slice();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in vals {
        let px = if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        };
        out.push(px);
    }
    out
}

const SQRT3_2: f64 = 0.866_025_403_784_438_6;

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Ternary scatter of one layer's mode points (L top-left, P top-right,
/// C bottom).
pub fn ternary_svg(layer: usize, points: &[BarycentricPoint]) -> String {
    let (pad, side) = (30.0, 340.0);
    let map = |x: f64, y: f64| (pad + x * side, pad + (SQRT3_2 - y) * side);
    let mut s = svg_open(2.0 * pad + side, 2.0 * pad + SQRT3_2 * side + 20.0);
    let (lx, ly) = map(0.0, SQRT3_2);
    let (px, py) = map(1.0, SQRT3_2);
    let (cx, cy) = map(0.5, 0.0);
    let _ = writeln!(
        s,
        "<polygon points=\"{lx:.2},{ly:.2} {px:.2},{py:.2} {cx:.2},{cy:.2}\" fill=\"none\" stroke=\"black\"/>"
    );
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\">L</text>", lx - 14.0, ly - 6.0);
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\">P</text>", px + 4.0, py - 6.0);
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\">C</text>", cx - 4.0, cy + 18.0);
    for p in points {
        if let Some((x, y)) = p.planar() {
            let (sx, sy) = map(x, y);
            let _ = writeln!(
                s,
                "<circle cx=\"{sx:.2}\" cy=\"{sy:.2}\" r=\"2.5\" fill=\"#3b6fb6\" fill-opacity=\"0.6\"/>"
            );
        }
    }
    let _ = writeln!(
        s,
        "<text x=\"{pad}\" y=\"{:.2}\" font-size=\"12\">layer {layer}</text>",
        2.0 * pad + SQRT3_2 * side + 10.0
    );
    s.push_str("</svg>\n");
    s
}

/// Side-by-side orthographic views, tokens colored by grid location.
pub fn rotation_svg(views: &[RotationView], grid_h: usize, grid_w: usize) -> String {
    let panel = 200.0;
    let mut s = svg_open(panel * views.len() as f64, panel + 20.0);
    let extent = views
        .iter()
        .flat_map(|v| v.points.iter().map(|(a, b)| a.abs().max(b.abs())))
        .fold(0.0f64, f64::max)
        .max(1e-300);
    for (i, view) in views.iter().enumerate() {
        let ox = i as f64 * panel;
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}°</text>",
            ox + 8.0,
            panel + 14.0,
            view.angle_deg
        );
        for (t, (h, v)) in view.points.iter().enumerate() {
            let [r, g, b] = grid_color(t / grid_w, t % grid_w, grid_h, grid_w);
            let sx = ox + panel / 2.0 + h / extent * (panel / 2.0 - 12.0);
            let sy = panel / 2.0 - v / extent * (panel / 2.0 - 12.0);
            let _ = writeln!(s, "<circle cx=\"{sx:.2}\" cy=\"{sy:.2}\" r=\"4\" fill=\"rgb({r},{g},{b})\"/>");
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Stacked bars of the six interaction shares per layer.
pub fn shares_svg(labels: &[&str; 6], layers: &[(usize, [f64; 6])]) -> String {
    const COLORS: [&str; 6] = ["#9e9e9e", "#e07b39", "#3b6fb6", "#e8c547", "#7fb3a8", "#b05fa6"];
    let (bar, gap, height, top) = (28.0, 8.0, 240.0, 10.0);
    let width = 20.0 + layers.len() as f64 * (bar + gap) + 90.0;
    let mut s = svg_open(width, height + 40.0);
    for (i, (layer, shares)) in layers.iter().enumerate() {
        let x = 20.0 + i as f64 * (bar + gap);
        let mut y = top + height;
        for (k, share) in shares.iter().enumerate() {
            let h = share * height;
            y -= h;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar}\" height=\"{h:.2}\" fill=\"{}\"/>",
                COLORS[k]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{layer}</text>",
            x + 8.0,
            top + height + 16.0
        );
    }
    let lx = 30.0 + layers.len() as f64 * (bar + gap);
    for (k, label) in labels.iter().enumerate() {
        let y = top + 14.0 * k as f64;
        let _ = writeln!(s, "<rect x=\"{lx:.2}\" y=\"{y:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>", COLORS[k]);
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{label}</text>",
            lx + 14.0,
            y + 9.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let g = Matrix::from_vec(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let bytes = pgm(&g);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 51, 102, 153, 204, 255]);
        let flat = pgm(&Matrix::zeros(1, 2));
        assert_eq!(&flat[flat.len() - 2..], &[128, 128]);
    }
}
