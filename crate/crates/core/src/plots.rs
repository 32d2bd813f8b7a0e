//! Static SVG figures: loss curves and metric bar charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

/// Line plot of named `(x, y)` series. With `log_y` the axis is log10 and
/// non-positive values are dropped.
pub fn line_chart(title: &str, x_label: &str, series: &[(&str, Vec<(f64, f64)>)], log_y: bool) -> String {
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
        .map(|(x, y)| (x, tf(y)))
        .collect();
    let mut svg = header(title);
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (mut x0, mut x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if x1 <= x0 {
        x1 = x0 + 1.0;
        x0 -= 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 0.5;
        y0 -= 0.5;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let _ = writeln!(
        svg,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let ylabel = if log_y { format!("{:.1e}", 10f64.powf(yv)) } else { format!("{yv:.3}") };
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xv:.0}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{ylabel}</text>",
            px(xv),
            HEIGHT - MARGIN + 16.0,
            MARGIN - 4.0,
            py(yv) + 4.0,
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    for (k, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = s
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(tf(y))))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            path.join(" "),
            WIDTH - MARGIN - 100.0,
            MARGIN + 16.0 + 14.0 * k as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Vertical bars with their values printed on top.
pub fn bar_chart(title: &str, bars: &[(&str, f64)]) -> String {
    let mut svg = header(title);
    let finite: Vec<f64> = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).collect();
    let top = finite.iter().copied().fold(0.0, f64::max).max(1e-12);
    let slot = (WIDTH - 2.0 * MARGIN) / bars.len().max(1) as f64;
    let base = HEIGHT - MARGIN;
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"#444\"/>",
        WIDTH - MARGIN
    );
    for (k, (name, v)) in bars.iter().enumerate() {
        let x = MARGIN + slot * k as f64 + slot * 0.15;
        let h = if v.is_finite() { v.max(0.0) / top * (HEIGHT - 2.0 * MARGIN) } else { 0.0 };
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            base - h,
            slot * 0.7,
            PALETTE[k % PALETTE.len()],
            x + slot * 0.35,
            base - h - 4.0,
            x + slot * 0.35,
            base + 16.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_draws_one_polyline_per_series() {
        let s = line_chart(
            "loss <total>",
            "step",
            &[("a", vec![(0.0, 1.0), (1.0, 0.1)]), ("b", vec![(0.0, 0.5), (1.0, 0.0)])],
            true,
        );
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("loss &lt;total&gt;"));
        assert!(s.trim_end().ends_with("</svg>"));
        // The zero is dropped on a log axis.
        let b = s.lines().filter(|l| l.contains("<polyline")).nth(1).unwrap();
        assert_eq!(b.matches(',').count(), 1);
    }

    #[test]
    fn empty_and_degenerate_inputs_still_produce_svg() {
        assert!(line_chart("t", "x", &[], false).contains("</svg>"));
        assert!(line_chart("t", "x", &[("c", vec![(3.0, 2.0)])], false).contains("<polyline"));
        let b = bar_chart("m", &[("PSNR", 30.0), ("SSIM", f64::NAN)]);
        assert_eq!(b.matches("<rect x=").count(), 2);
    }
}
