//! Minimal SVG figures: rate–distortion curves and per-channel intensity
//! distributions.

use std::fmt::Write;

use crate::evaluation::{ChannelStats, Metric, RdPoint};

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const CHANNEL_COLORS: [&str; 3] = ["#d62728", "#2ca02c", "#1f77b4"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = span(&mut xs.filter(|v| v.is_finite()));
        let (y0, y1) = span(&mut ys.filter(|v| v.is_finite()));
        Axes { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }

    fn draw(&self, svg: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = write!(
            svg,
            r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
            r - l,
            b - t
        );
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = self.x0 + f * (self.x1 - self.x0);
            let yv = self.y0 + f * (self.y1 - self.y0);
            let (x, y) = (self.px(xv), self.py(yv));
            let _ = write!(
                svg,
                r##"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{xv:.3}</text><text x="{:.1}" y="{y:.1}" font-size="11" text-anchor="end">{yv:.3}</text>"##,
                b + 16.0,
                l - 6.0
            );
        }
        let _ = write!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text><text x="16" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"##,
            W / 2.0,
            H - 18.0,
            escape(xlabel),
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
    }
}

fn open_svg() -> String {
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif"><rect width="100%" height="100%" fill="white"/>"##
    )
}

/// Quality-versus-bpp curves, one polyline per named series.
pub fn rd_curves(series: &[(String, Vec<RdPoint>)], metric: Metric) -> String {
    let q = |p: &RdPoint| p.quality(metric);
    let axes = Axes::fit(
        series.iter().flat_map(|(_, s)| s.iter().map(|p| p.bpp)),
        series.iter().flat_map(|(_, s)| s.iter().map(q)),
    );
    let mut svg = open_svg();
    let ylabel = match metric {
        Metric::Psnr => "PSNR (dB)",
        Metric::MsSsim => "MS-SSIM",
    };
    axes.draw(&mut svg, "bits per pixel", ylabel);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<&RdPoint> = pts.iter().filter(|p| q(p).is_finite()).collect();
        pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        let path: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.1},{:.1}", axes.px(p.bpp), axes.py(q(p))))
            .collect();
        let _ = write!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"##,
            path.join(" ")
        );
        for p in &pts {
            let _ = write!(
                svg,
                r##"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"##,
                axes.px(p.bpp),
                axes.py(q(p))
            );
        }
        let _ = write!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="12" fill="{color}">{}</text>"##,
            MARGIN + 10.0,
            MARGIN + 16.0 + 16.0 * i as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Side-by-side box plots of R, G, B for each named dataset, with the
/// histogram drawn as a violin outline behind each box.
pub fn channel_distributions(sets: &[(String, ChannelStats)]) -> String {
    let mut svg = open_svg();
    let axes = Axes {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };
    axes.draw(&mut svg, "dataset / channel", "intensity");
    let slots = (sets.len() * 3).max(1) as f64;
    let slot_w = (W - 2.0 * MARGIN) / slots;
    for (d, (name, stats)) in sets.iter().enumerate() {
        for (c, ch) in stats.channels.iter().enumerate() {
            let color = CHANNEL_COLORS[c];
            let cx = MARGIN + slot_w * ((d * 3 + c) as f64 + 0.5);
            let peak = ch.histogram.iter().copied().max().unwrap_or(1).max(1) as f64;
            let half = 0.45 * slot_w;
            let mut left = Vec::new();
            let mut right = Vec::new();
            for (v, &n) in ch.histogram.iter().enumerate() {
                let y = axes.py(v as f64 / 255.0);
                let dx = half * n as f64 / peak;
                left.push(format!("{:.1},{y:.1}", cx - dx));
                right.push(format!("{:.1},{y:.1}", cx + dx));
            }
            right.reverse();
            left.extend(right);
            let _ = write!(
                svg,
                r##"<polygon points="{}" fill="{color}" fill-opacity="0.25" stroke="{color}"/>"##,
                left.join(" ")
            );
            let bw = 0.15 * slot_w;
            let (y1, y3) = (axes.py(ch.q3), axes.py(ch.q1));
            let _ = write!(
                svg,
                r##"<rect x="{:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="white" stroke="{color}"/><line x1="{:.1}" x2="{:.1}" y1="{m:.1}" y2="{m:.1}" stroke="{color}" stroke-width="2"/><circle cx="{cx:.1}" cy="{:.1}" r="3" fill="{color}"/>"##,
                cx - bw,
                2.0 * bw,
                (y3 - y1).max(0.5),
                cx - bw,
                cx + bw,
                axes.py(ch.mean),
                m = axes.py(ch.median),
            );
        }
        let _ = write!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"##,
            MARGIN + slot_w * (d as f64 * 3.0 + 1.5),
            MARGIN - 8.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::channel_stats;
    use crate::image::ImageTensor;

    #[test]
    fn figures_are_well_formed_svg() {
        let pts = vec![
            RdPoint {
                bpp: 0.2,
                psnr: 30.0,
                ms_ssim: 0.9,
            },
            RdPoint {
                bpp: 0.4,
                psnr: f64::INFINITY,
                ms_ssim: 0.95,
            },
        ];
        let svg = rd_curves(&[("a<b>".into(), pts)], Metric::Psnr);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b&gt;") && !svg.contains("NaN") && !svg.contains("inf"));

        let stats = channel_stats(&[ImageTensor::filled(4, 4, [0.2, 0.5, 0.7])]).unwrap();
        let svg = channel_distributions(&[("uw".into(), stats.clone()), ("land".into(), stats)]);
        assert_eq!(svg.matches("<polygon").count(), 6);
        assert!(!svg.contains("NaN"));
    }
}
