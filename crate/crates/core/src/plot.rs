//! Tiny self-contained SVG emitters for loss curves, CMC curves, and the
//! intra/inter distance histogram.

use crate::eval::DistanceHistogram;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One named polyline.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: &'a [(f64, f64)],
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn of(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>) -> Frame {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for x in xs {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
        }
        for y in ys {
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() || !f.x1.is_finite() {
            f.x0 = 0.0;
            f.x1 = 1.0;
        }
        if !f.y0.is_finite() || !f.y1.is_finite() {
            f.y0 = 0.0;
            f.y1 = 1.0;
        }
        // Degenerate spans still need a drawable box.
        if f.x1 <= f.x0 {
            f.x1 = f.x0 + 1.0;
        }
        if f.y1 <= f.y0 {
            f.y1 = f.y0 + 1.0;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        esc(title)
    )
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (bx, by) = (f.px(f.x0), f.py(f.y0));
    let (tx, ty) = (f.px(f.x1), f.py(f.y1));
    out.push_str(&format!(
        "<line x1=\"{bx}\" y1=\"{by}\" x2=\"{tx}\" y2=\"{by}\" stroke=\"black\"/>\n\
         <line x1=\"{bx}\" y1=\"{by}\" x2=\"{bx}\" y2=\"{ty}\" stroke=\"black\"/>\n"
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x0 + t * (f.x1 - f.x0);
        let yv = f.y0 + t * (f.y1 - f.y0);
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" class=\"tick\">{}</text>\n",
            f.px(xv),
            by + 16.0,
            fmt_tick(xv)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" class=\"tick\">{}</text>\n",
            bx - 6.0,
            f.py(yv) + 4.0,
            fmt_tick(yv)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (bx + tx) / 2.0,
        HEIGHT - 12.0,
        esc(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        (by + ty) / 2.0,
        (by + ty) / 2.0,
        esc(y_label)
    ));
}

/// Multi-series line plot (e.g. training losses over iterations).
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let f = Frame::of(
        series.iter().flat_map(|s| s.points.iter().map(|p| p.0)),
        series.iter().flat_map(|s| s.points.iter().map(|p| p.1)),
    );
    let mut out = svg_open(title);
    axes(&mut out, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            WIDTH - MARGIN_R - 110.0,
            MARGIN_T + 16.0 * i as f64,
            esc(s.name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Paired-bar histogram of intra-class vs inter-class distances.
pub fn histogram_plot(title: &str, h: &DistanceHistogram) -> String {
    let bins = h.intra.len();
    let ymax = h.intra.iter().chain(&h.inter).copied().max().unwrap_or(1).max(1) as f64;
    let f = Frame {
        x0: h.edges[0],
        x1: *h.edges.last().unwrap(),
        y0: 0.0,
        y1: ymax,
    };
    let mut out = svg_open(title);
    axes(&mut out, &f, "feature distance", "pairs");
    for i in 0..bins {
        let (lo, hi) = (h.edges[i], h.edges[i + 1]);
        let w = (f.px(hi) - f.px(lo)).max(2.0);
        for (j, (count, color)) in
            [(h.intra[i], PALETTE[0]), (h.inter[i], PALETTE[1])].into_iter().enumerate()
        {
            let x = f.px(lo) + j as f64 * w / 2.0;
            let y = f.py(count as f64);
            let height = f.py(0.0) - y;
            out.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{height:.2}\" \
                 fill=\"{color}\" fill-opacity=\"0.7\"/>\n",
                w / 2.0
            ));
        }
    }
    for (i, name) in ["same identity", "different identity"].iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n",
            WIDTH - MARGIN_R - 130.0,
            MARGIN_T + 16.0 * i as f64,
            PALETTE[i],
            name
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_draws_one_polyline_per_series() {
        let a = [(0.0, 1.0), (1.0, 2.0), (2.0, 1.5)];
        let b = [(0.0, 0.5), (2.0, 0.1)];
        let svg = line_plot(
            "losses & more",
            "iteration",
            "value",
            &[Series { name: "total", points: &a }, Series { name: "kl", points: &b }],
        );
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("losses &amp; more"), "title is escaped");
        assert!(svg.contains("total") && svg.contains("kl"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn degenerate_inputs_stay_finite() {
        let flat = [(0.0, 3.0), (5.0, 3.0)];
        let svg = line_plot("flat", "x", "y", &[Series { name: "s", points: &flat }]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        let single = [(1.0, 1.0)];
        let svg = line_plot("dot", "x", "y", &[Series { name: "s", points: &single }]);
        assert!(!svg.contains("NaN"));
        let empty: [(f64, f64); 0] = [];
        let svg = line_plot("none", "x", "y", &[Series { name: "s", points: &empty }]);
        assert!(svg.contains("</svg>"));
    }

    #[test]
    fn histogram_plot_draws_two_bars_per_bin() {
        let h = DistanceHistogram {
            edges: vec![0.0, 1.0, 2.0, 3.0],
            intra: vec![4, 1, 0],
            inter: vec![0, 2, 5],
            intra_mean: 0.5,
            inter_mean: 2.2,
        };
        let svg = histogram_plot("distances", &h);
        assert_eq!(svg.matches("<rect").count(), 1 + 6, "backdrop + two bars per bin");
        assert!(!svg.contains("NaN"));
    }
}
