//! Deterministic SVG rendering for the figure styles the experiments
//! emit: heat maps with an optional predictability-time overlay, scatter
//! plots, line charts with error bars, and ridgeline stacks of
//! distributions. Byte output is a pure function of the input data.

use std::fmt::Write as _;

const MARGIN: f64 = 56.0;
const PLOT_W: f64 = 560.0;
const PLOT_H: f64 = 420.0;

fn fnum(v: f64) -> String {
    if v == v.floor() && v.abs() < 1e7 {
        format!("{}", v as i64)
    } else {
        format!("{v:.4}")
    }
}

/// Five-stop blue-to-orange map on [0, 1]; NaN renders gray.
fn colormap(t: f64) -> String {
    if !t.is_finite() {
        return "#9e9e9e".into();
    }
    let stops: [(f64, [u8; 3]); 5] = [
        (0.0, [33, 56, 112]),
        (0.25, [52, 130, 168]),
        (0.5, [222, 222, 200]),
        (0.75, [236, 150, 64]),
        (1.0, [180, 49, 27]),
    ];
    let t = t.clamp(0.0, 1.0);
    let mut rgb = stops[4].1;
    for w in stops.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            rgb = [
                (c0[0] as f64 + f * (c1[0] as f64 - c0[0] as f64)) as u8,
                (c0[1] as f64 + f * (c1[1] as f64 - c0[1] as f64)) as u8,
                (c0[2] as f64 + f * (c1[2] as f64 - c0[2] as f64)) as u8,
            ];
            break;
        }
    }
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

fn document(title: &str, body: &str) -> String {
    let w = PLOT_W + 2.0 * MARGIN;
    let h = PLOT_H + 2.0 * MARGIN;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n\
         {body}</svg>\n",
        w / 2.0
    )
}

/// One heat-map cell: `None` renders the divergence mask.
pub struct HeatCell {
    pub value: Option<f64>,
}

/// Heat map over a rectangular grid; `axis1` indexes columns (x),
/// `axis2` rows (y, increasing upward). `overlay` draws a polyline in
/// data coordinates (used for the predictability-time curve).
pub fn heatmap(
    title: &str,
    axis1_name: &str,
    axis1: &[f64],
    axis2_name: &str,
    axis2: &[f64],
    cells: &[HeatCell],
    overlay: Option<&[(f64, f64)]>,
) -> String {
    assert_eq!(cells.len(), axis1.len() * axis2.len());
    let finite: Vec<f64> = cells.iter().filter_map(|c| c.value).filter(|v| v.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cw = PLOT_W / axis1.len() as f64;
    let ch = PLOT_H / axis2.len() as f64;
    let mut body = String::new();
    for (j, _a2) in axis2.iter().enumerate() {
        for (i, _a1) in axis1.iter().enumerate() {
            let cell = &cells[j * axis1.len() + i];
            let color = match cell.value {
                Some(v) if v.is_finite() => colormap((v - lo) / span),
                _ => "#9e9e9e".into(),
            };
            let x = MARGIN + i as f64 * cw;
            // Row 0 at the bottom.
            let y = MARGIN + PLOT_H - (j + 1) as f64 * ch;
            let _ = writeln!(
                body,
                "<rect class=\"cell\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>",
                fnum(x),
                fnum(y),
                fnum(cw),
                fnum(ch)
            );
        }
    }
    // Axis tick labels.
    for (i, a1) in axis1.iter().enumerate() {
        let x = MARGIN + (i as f64 + 0.5) * cw;
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            fnum(x),
            fnum(MARGIN + PLOT_H + 18.0),
            fnum(*a1)
        );
    }
    for (j, a2) in axis2.iter().enumerate() {
        let y = MARGIN + PLOT_H - (j as f64 + 0.5) * ch;
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            fnum(MARGIN - 8.0),
            fnum(y + 4.0),
            fnum(*a2)
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{axis1_name}</text>",
        fnum(MARGIN + PLOT_W / 2.0),
        fnum(MARGIN + PLOT_H + 40.0)
    );
    let _ = writeln!(
        body,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{axis2_name}</text>",
        fnum(MARGIN + PLOT_H / 2.0),
        fnum(MARGIN + PLOT_H / 2.0)
    );
    // Overlay polyline in data coordinates (axis values index positions).
    if let Some(points) = overlay {
        let a1_pos = |v: f64| -> Option<f64> {
            position_on_axis(axis1, v).map(|p| MARGIN + (p + 0.5) * cw)
        };
        let a2_pos = |v: f64| -> Option<f64> {
            position_on_axis(axis2, v).map(|p| MARGIN + PLOT_H - (p + 0.5) * ch)
        };
        let mut pts = String::new();
        for (x, y) in points {
            if let (Some(px), Some(py)) = (a1_pos(*x), a2_pos(*y)) {
                let _ = write!(pts, "{},{} ", fnum(px), fnum(py));
            }
        }
        if !pts.is_empty() {
            let _ = writeln!(
                body,
                "<polyline class=\"overlay\" points=\"{}\" fill=\"none\" stroke=\"#d21f1f\" stroke-width=\"2\"/>",
                pts.trim_end()
            );
        }
    }
    document(title, &body)
}

/// Fractional index of `v` along a monotone axis (for overlay placement);
/// `None` outside the range.
fn position_on_axis(axis: &[f64], v: f64) -> Option<f64> {
    if axis.len() < 2 {
        return None;
    }
    let ascending = axis[axis.len() - 1] >= axis[0];
    for i in 0..axis.len() - 1 {
        let (a, b) = (axis[i], axis[i + 1]);
        let inside = if ascending { v >= a && v <= b } else { v <= a && v >= b };
        if inside {
            return Some(i as f64 + (v - a) / (b - a));
        }
    }
    None
}

/// Scatter plot; `series` are `(label, color, points)`.
pub fn scatter(
    title: &str,
    x_name: &str,
    y_name: &str,
    series: &[(&str, &str, Vec<(f64, f64)>)],
) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.2.iter().cloned()).collect();
    let (x_lo, x_hi) = bounds(all.iter().map(|p| p.0));
    let (y_lo, y_hi) = bounds(all.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo).max(1e-300) * PLOT_W;
    let sy = |y: f64| MARGIN + PLOT_H - (y - y_lo) / (y_hi - y_lo).max(1e-300) * PLOT_H;
    let mut body = String::new();
    axes(&mut body, x_name, y_name, x_lo, x_hi, y_lo, y_hi);
    for (label, color, points) in series {
        for (x, y) in points {
            let _ = writeln!(
                body,
                "<circle cx=\"{}\" cy=\"{}\" r=\"1.6\" fill=\"{color}\"/>",
                fnum(sx(*x)),
                fnum(sy(*y))
            );
        }
        let _ = label;
    }
    document(title, &body)
}

/// Line chart with optional symmetric error bars; series are
/// `(label, color, points (x, y, err))`.
pub fn line_chart(
    title: &str,
    x_name: &str,
    y_name: &str,
    series: &[(&str, &str, Vec<(f64, f64, f64)>)],
) -> String {
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.2.iter().map(|p| (p.0, p.1)))
        .collect();
    let (x_lo, x_hi) = bounds(all.iter().map(|p| p.0));
    let (y_lo, y_hi) = bounds(
        series
            .iter()
            .flat_map(|s| s.2.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2])),
    );
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo).max(1e-300) * PLOT_W;
    let sy = |y: f64| MARGIN + PLOT_H - (y - y_lo) / (y_hi - y_lo).max(1e-300) * PLOT_H;
    let mut body = String::new();
    axes(&mut body, x_name, y_name, x_lo, x_hi, y_lo, y_hi);
    for (li, (label, color, points)) in series.iter().enumerate() {
        let mut pts = String::new();
        for (x, y, e) in points {
            let _ = write!(pts, "{},{} ", fnum(sx(*x)), fnum(sy(*y)));
            if *e > 0.0 {
                let _ = writeln!(
                    body,
                    "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1\"/>",
                    fnum(sx(*x)),
                    fnum(sy(y - e)),
                    fnum(sx(*x)),
                    fnum(sy(y + e))
                );
            }
        }
        let _ = writeln!(
            body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            pts.trim_end()
        );
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>",
            fnum(MARGIN + PLOT_W - 140.0),
            fnum(MARGIN + 16.0 + 16.0 * li as f64)
        );
    }
    document(title, &body)
}

/// Ridgeline stack: one kernel-density silhouette per group, bottom-up.
pub fn ridgeline(title: &str, x_name: &str, groups: &[(String, Vec<f64>)]) -> String {
    let all: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().cloned()).collect();
    let (x_lo, x_hi) = bounds(all.iter().cloned());
    let span = (x_hi - x_lo).max(1e-12);
    let bw = 0.05 * span;
    let n_groups = groups.len().max(1);
    let lane = PLOT_H / n_groups as f64;
    let sx = |x: f64| MARGIN + (x - x_lo) / span * PLOT_W;
    let mut body = String::new();
    let grid = 200usize;
    for (gi, (name, values)) in groups.iter().enumerate() {
        let base_y = MARGIN + PLOT_H - gi as f64 * lane;
        let mut density = vec![0.0f64; grid + 1];
        for (k, d) in density.iter_mut().enumerate() {
            let x = x_lo + span * k as f64 / grid as f64;
            for v in values {
                let z = (x - v) / bw;
                *d += (-0.5 * z * z).exp();
            }
        }
        let peak = density.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
        let mut pts = String::new();
        let _ = write!(pts, "{},{} ", fnum(sx(x_lo)), fnum(base_y));
        for (k, d) in density.iter().enumerate() {
            let x = x_lo + span * k as f64 / grid as f64;
            let y = base_y - d / peak * lane * 1.4;
            let _ = write!(pts, "{},{} ", fnum(sx(x)), fnum(y));
        }
        let _ = write!(pts, "{},{}", fnum(sx(x_hi)), fnum(base_y));
        let _ = writeln!(
            body,
            "<polyline points=\"{pts}\" fill=\"rgba(80,120,200,0.35)\" stroke=\"#2c4a8c\" stroke-width=\"1\"/>"
        );
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{name}</text>",
            fnum(MARGIN - 8.0),
            fnum(base_y - 2.0)
        );
    }
    // Zero marker.
    if x_lo < 0.0 && x_hi > 0.0 {
        let _ = writeln!(
            body,
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>",
            fnum(sx(0.0)),
            fnum(MARGIN),
            fnum(MARGIN + PLOT_H)
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_name}</text>",
        fnum(MARGIN + PLOT_W / 2.0),
        fnum(MARGIN + PLOT_H + 40.0)
    );
    document(title, &body)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn axes(body: &mut String, x_name: &str, y_name: &str, x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) {
    let _ = writeln!(
        body,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
        fnum(MARGIN),
        fnum(MARGIN),
        fnum(PLOT_W),
        fnum(PLOT_H)
    );
    for (v, x) in [(x_lo, MARGIN), (x_hi, MARGIN + PLOT_W)] {
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            fnum(x),
            fnum(MARGIN + PLOT_H + 18.0),
            fnum(v)
        );
    }
    for (v, y) in [(y_lo, MARGIN + PLOT_H), (y_hi, MARGIN)] {
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            fnum(MARGIN - 8.0),
            fnum(y + 4.0),
            fnum(v)
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_name}</text>",
        fnum(MARGIN + PLOT_W / 2.0),
        fnum(MARGIN + PLOT_H + 40.0)
    );
    let _ = writeln!(
        body,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_name}</text>",
        fnum(MARGIN + PLOT_H / 2.0),
        fnum(MARGIN + PLOT_H / 2.0)
    );
}
