//! Minimal self-contained SVG figures: scatter, heatmap, bar and line plots.

use std::fmt::Write;

use crate::metrics::{DistanceHistogram, Heatmap};
use crate::tensor::Tensor;

const W: f64 = 480.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: &[f64], ys: &[f64]) -> Frame {
        let span = |v: &[f64]| {
            let (lo, hi) = v
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        Frame { x: span(xs), y: span(ys) }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (PAD, W - PAD, H - PAD, PAD);
    let _ = writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let fx = f.x.0 + (f.x.1 - f.x.0) * k as f64 / 4.0;
        let fy = f.y.0 + (f.y.1 - f.y.0) * k as f64 / 4.0;
        let _ =
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(fx), y0 + 15.0, tick(fx));
        let _ =
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, f.py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#,
            W - PAD - 110.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - PAD - 95.0, y, escape(name));
    }
}

/// Overlaid 2-D point clouds, one color per set.
pub fn scatter(title: &str, sets: &[(&str, &Tensor)]) -> String {
    let xs: Vec<f64> = sets.iter().flat_map(|(_, t)| t.iter_rows().map(|r| r[0])).collect();
    let ys: Vec<f64> = sets.iter().flat_map(|(_, t)| t.iter_rows().map(|r| r.get(1).copied().unwrap_or(0.0))).collect();
    let f = Frame::fit(&xs, &ys);
    let mut s = open(title);
    axes(&mut s, &f, "x₁", "x₂");
    for (i, (_, t)) in sets.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g fill="{color}" fill-opacity="0.5">"#);
        for r in t.iter_rows() {
            let (x, y) = (r[0], r.get(1).copied().unwrap_or(0.0));
            if x.is_finite() && y.is_finite() {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#, f.px(x), f.py(y));
            }
        }
        s += "</g>\n";
    }
    legend(&mut s, &sets.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s += "</svg>\n";
    s
}

/// Grey-scale raster of per-cell mean loss on log scale; empty cells blank.
pub fn heatmap(title: &str, h: &Heatmap) -> String {
    let f = Frame { x: (0.0, 1.0), y: (0.0, 1.0) };
    let mut s = open(title);
    axes(&mut s, &f, "r", "t");
    let logs: Vec<f64> = h.occupied().map(|c| c.mean.max(1e-300).ln()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cell = 1.0 / h.grid_n as f64;
    for c in h.occupied() {
        let level = if hi > lo { (c.mean.max(1e-300).ln() - lo) / (hi - lo) } else { 0.5 };
        let shade = (255.0 * (1.0 - level)).round() as u8;
        let (x0, x1) = (f.px(c.r_index as f64 * cell), f.px((c.r_index + 1) as f64 * cell));
        let (y0, y1) = (f.py((c.t_index + 1) as f64 * cell), f.py(c.t_index as f64 * cell));
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
            x1 - x0,
            y1 - y0
        );
    }
    s += "</svg>\n";
    s
}

/// Bars of coupling counts per distance bin, labelled with mean angular error.
pub fn histogram(title: &str, h: &DistanceHistogram) -> String {
    let max_count = h.bins.iter().map(|b| b.count).max().unwrap_or(1).max(1) as f64;
    let f = Frame {
        x: (h.bins.first().map_or(0.0, |b| b.lo), h.bins.last().map_or(1.0, |b| b.hi)),
        y: (0.0, max_count * 1.1),
    };
    let mut s = open(title);
    axes(&mut s, &f, "‖x − z‖", "count");
    let max_err = h.bins.iter().filter(|b| b.count > 0).map(|b| b.mean_error).fold(0.0, f64::max).max(1e-12);
    for b in &h.bins {
        if b.count == 0 {
            continue;
        }
        let red = (255.0 * b.mean_error / max_err).round() as u8;
        let (x0, x1) = (f.px(b.lo), f.px(b.hi));
        let (y0, y1) = (f.py(b.count as f64), f.py(0.0));
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="rgb({red},60,{})" stroke="white"/>"#,
            x1 - x0,
            y1 - y0,
            255 - red
        );
    }
    let px = f.px(h.p90_distance);
    let _ = writeln!(
        s,
        r#"<line x1="{px:.2}" y1="{PAD}" x2="{px:.2}" y2="{}" stroke="black" stroke-dasharray="4 3"/>"#,
        H - PAD
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{}">p90</text>"#, px + 3.0, PAD + 12.0);
    s += "</svg>\n";
    s
}

/// Polylines, one per named series of `(x, y)` points.
pub fn lines(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
    let f = Frame::fit(&xs, &ys);
    let mut s = open(title);
    axes(&mut s, &f, xlabel, ylabel);
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
    }
    legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_are_well_formed_enough() {
        let t = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5]).unwrap();
        let sc = scatter("a < b", &[("pts", &t)]);
        assert!(sc.starts_with("<svg") && sc.trim_end().ends_with("</svg>"));
        assert_eq!(sc.matches("<circle").count(), 3);
        assert!(sc.contains("a &lt; b"));
        let ln = lines("c", "x", "y", &[("s", vec![(0.0, 1.0), (1.0, 0.5)])]);
        assert!(ln.contains("<polyline"));
    }
}
