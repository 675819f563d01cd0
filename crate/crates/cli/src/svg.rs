//! Minimal SVG histogram emission.

/// Renders a fixed-bin histogram of values in [0, 1] as standalone SVG.
/// Output is deterministic for identical inputs.
pub fn histogram_svg(values: &[f64], bins: usize, title: &str) -> String {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let max_count = counts.iter().copied().max().unwrap_or(0).max(1);

    let (width, height) = (520.0, 340.0);
    let (left, right, top, bottom) = (50.0, 20.0, 40.0, 40.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let bar_w = plot_w / bins as f64;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"14\" \
         text-anchor=\"middle\">{title}</text>\n",
        width / 2.0
    ));
    for (i, &c) in counts.iter().enumerate() {
        let h = plot_h * c as f64 / max_count as f64;
        let x = left + i as f64 * bar_w;
        let y = top + plot_h - h;
        s.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"#4878a8\" stroke=\"#ffffff\"/>\n",
            x,
            y,
            bar_w,
            h
        ));
    }
    // axes
    s.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#000\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    s.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"#000\"/>\n",
        top + plot_h
    ));
    for k in 0..=5 {
        let frac = k as f64 / 5.0;
        let x = left + plot_w * frac;
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"middle\">{:.1}</text>\n",
            x,
            top + plot_h + 16.0,
            frac
        ));
    }
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
         text-anchor=\"end\">{max_count}</text>\n",
        left - 6.0,
        top + 10.0
    ));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let vals = vec![0.1, 0.5, 0.55, 0.9, 1.0, 0.0];
        let a = histogram_svg(&vals, 20, "dice");
        let b = histogram_svg(&vals, 20, "dice");
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<rect").count(), 20);
    }

    #[test]
    fn out_of_range_values_clamp_into_edge_bins() {
        let svg = histogram_svg(&[1.0, 1.0, 1.0], 10, "x");
        assert!(svg.contains("<rect"));
    }
}
