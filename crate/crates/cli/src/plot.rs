//! Minimal SVG writers for step curves, bar charts and heatmaps.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let _ = writeln!(
        s,
        "<path d=\"M{PAD} {PAD} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        H - PAD,
        W - PAD / 2.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

/// Right-continuous step curves; each series is `(label, times, values)`
/// starting at `(0, 1)`.
pub fn step_curves(title: &str, series: &[(String, Vec<f64>, Vec<f64>)], x_label: &str, y_label: &str) -> String {
    let t_max = series
        .iter()
        .flat_map(|(_, t, _)| t.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let sx = |t: f64| PAD + t / t_max * (W - 1.5 * PAD);
    let sy = |v: f64| H - PAD - v * (H - 2.0 * PAD);
    let mut s = header(title);
    axes(&mut s, x_label, y_label);
    for (k, (label, times, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = format!("M{:.2} {:.2}", sx(0.0), sy(1.0));
        let mut last = 1.0;
        for (t, v) in times.iter().zip(values) {
            let _ = write!(d, " H{:.2} V{:.2}", sx(*t), sy(*v));
            last = *v;
        }
        let _ = write!(d, " H{:.2} V{:.2}", sx(t_max), sy(last));
        let _ = writeln!(s, "<path d=\"{d}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"1.5\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\" font-family=\"sans-serif\">{}</text>",
            W - 140.0,
            PAD + 16.0 * k as f64,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars with labels under each bar.
pub fn bars(title: &str, items: &[(String, f64)], y_label: &str) -> String {
    let v_max = items.iter().map(|(_, v)| v.abs()).fold(0.0f64, f64::max).max(1e-12);
    let n = items.len().max(1) as f64;
    let slot = (W - 1.5 * PAD) / n;
    let zero = H - PAD;
    let mut s = header(title);
    axes(&mut s, "", y_label);
    for (k, (label, v)) in items.iter().enumerate() {
        let h = v.abs() / v_max * (H - 2.0 * PAD);
        let x = PAD + k as f64 * slot + slot * 0.15;
        let color = if *v >= 0.0 { COLORS[0] } else { COLORS[1] };
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{color}\"/>",
            zero - h,
            slot * 0.7
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"9\" text-anchor=\"end\" font-family=\"sans-serif\" transform=\"rotate(-45 {:.2} {:.2})\">{}</text>",
            x + slot * 0.35,
            zero + 12.0,
            x + slot * 0.35,
            zero + 12.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Rows of nonnegative cells shaded by value relative to the maximum.
pub fn heatmap(title: &str, rows: &[(String, Vec<f64>)]) -> String {
    let n_cols = rows.iter().map(|(_, r)| r.len()).max().unwrap_or(1).max(1) as f64;
    let n_rows = rows.len().max(1) as f64;
    let v_max = rows.iter().flat_map(|(_, r)| r.iter().copied()).fold(0.0f64, f64::max).max(1e-12);
    let cw = (W - 1.5 * PAD) / n_cols;
    let ch = (H - 2.0 * PAD) / n_rows;
    let mut s = header(title);
    for (i, (label, r)) in rows.iter().enumerate() {
        let y = PAD + i as f64 * ch;
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{}</text>",
            PAD - 4.0,
            y + ch / 2.0 + 3.0,
            escape(label)
        );
        for (j, v) in r.iter().enumerate() {
            let shade = 255.0 - (v / v_max).clamp(0.0, 1.0) * 255.0;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{cw:.2}\" height=\"{ch:.2}\" fill=\"rgb({shade:.0},{shade:.0},255)\"/>",
                PAD + j as f64 * cw
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_closed_svg() {
        for svg in [
            step_curves("km", &[("a".into(), vec![1.0, 2.0], vec![0.5, 0.25])], "t", "S"),
            bars("b", &[("x".into(), 1.0), ("y".into(), -0.5)], "v"),
            heatmap("h", &[("r".into(), vec![0.1, 0.9])]),
        ] {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        }
    }

    #[test]
    fn labels_are_escaped() {
        assert!(bars("a<b", &[], "v").contains("a&lt;b"));
    }
}
