//! Columnar plot data and minimal SVG rendering.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Writes equal-length columns as a tab-separated file with a header row.
pub fn write_columns(path: &Path, headers: &[&str], columns: &[&[f64]]) -> Result<()> {
    let rows = columns.first().map_or(0, |c| c.len());
    if headers.len() != columns.len() || columns.iter().any(|c| c.len() != rows) {
        return Err(Error::InvalidArgument("columns must match headers and share a length".into()));
    }
    let mut s = headers.join("\t");
    s.push('\n');
    for r in 0..rows {
        let line: Vec<String> = columns.iter().map(|c| c[r].to_string()).collect();
        s.push_str(&line.join("\t"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Fixed-width bins over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let w = (hi - lo) / counts.len() as f64;
        for &v in values {
            if v.is_finite() && v >= lo && v <= hi {
                let b = (((v - lo) / w) as usize).min(counts.len() - 1);
                counts[b] += 1;
            }
        }
        Self { lo, hi, counts }
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (0..self.counts.len()).map(|i| self.lo + (i as f64 + 0.5) * w).collect()
    }

    /// Counts divided by the total.
    pub fn density(&self) -> Vec<f64> {
        let n = self.counts.iter().sum::<usize>().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn bounds<'a>(vals: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn frame(title: &str, x: (f64, f64), y: (f64, f64)) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n\
         <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        W / 2.0,
        escape(title),
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for (v, px, py, anchor) in [
        (x.0, PAD, H - PAD + 14.0, "start"),
        (x.1, W - PAD, H - PAD + 14.0, "end"),
        (y.0, PAD - 4.0, H - PAD, "end"),
        (y.1, PAD - 4.0, PAD + 8.0, "end"),
    ] {
        let _ = writeln!(s, "<text x=\"{px}\" y=\"{py}\" text-anchor=\"{anchor}\">{v:.3}</text>");
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn map(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

/// Line plot of one or more series sharing `xs`; `marks` are x positions
/// drawn as dashed vertical lines.
pub fn line_svg(title: &str, xs: &[f64], series: &[(&str, &[f64])], marks: &[f64]) -> String {
    let xb = bounds(xs.iter());
    let yb = bounds(series.iter().flat_map(|(_, v)| v.iter()));
    let mut s = frame(title, xb, yb);
    for &m in marks {
        let px = map(m, xb, PAD, W - PAD);
        let _ = writeln!(s, "<line x1=\"{px:.1}\" y1=\"{PAD}\" x2=\"{px:.1}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>", H - PAD);
    }
    for (k, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(*ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| format!("{:.1},{:.1}", map(x, xb, PAD, W - PAD), map(y, yb, H - PAD, PAD)))
            .collect();
        let c = COLORS[k % COLORS.len()];
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", W - PAD - 4.0, PAD + 14.0 * (k as f64 + 1.0), escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Overlaid step histograms of densities; all histograms must share bins.
pub fn histogram_svg(title: &str, hists: &[(&str, &Histogram)]) -> String {
    let Some((_, first)) = hists.first() else {
        return line_svg(title, &[], &[], &[]);
    };
    let xb = (first.lo, first.hi);
    let dens: Vec<Vec<f64>> = hists.iter().map(|(_, h)| h.density()).collect();
    let yb = (0.0, dens.iter().flatten().fold(0.0f64, |m, &v| m.max(v)).max(1e-12));
    let mut s = frame(title, xb, yb);
    let n = first.counts.len();
    let bw = (first.hi - first.lo) / n as f64;
    for (k, ((name, _), d)) in hists.iter().zip(&dens).enumerate() {
        let c = COLORS[k % COLORS.len()];
        let mut pts = vec![format!("{:.1},{:.1}", PAD, H - PAD)];
        for (i, v) in d.iter().enumerate() {
            let y = map(*v, yb, H - PAD, PAD);
            pts.push(format!("{:.1},{y:.1}", map(first.lo + i as f64 * bw, xb, PAD, W - PAD)));
            pts.push(format!("{:.1},{y:.1}", map(first.lo + (i + 1) as f64 * bw, xb, PAD, W - PAD)));
        }
        pts.push(format!("{:.1},{:.1}", W - PAD, H - PAD));
        let _ = writeln!(s, "<polyline fill=\"{c}\" fill-opacity=\"0.25\" stroke=\"{c}\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", W - PAD - 4.0, PAD + 14.0 * (k as f64 + 1.0), escape(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_and_edges() {
        let h = Histogram::new(&[0.0, 0.1, 0.5, 1.0, 2.0], 0.0, 1.0, 4);
        assert_eq!(h.counts, vec![2, 0, 1, 1]);
        assert_eq!(h.centers(), vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = line_svg("a<b", &[0.0, 1.0, 2.0], &[("sim", &[0.1, 0.3, 0.2])], &[1.0]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b") && s.contains("polyline"));
    }
}
