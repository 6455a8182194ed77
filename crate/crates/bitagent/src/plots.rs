//! Static SVG line charts.

use std::fmt::Write as _;

use bitagent_core::eval::StepTrace;
use bitagent_core::train::MetricsRow;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A line chart with axes, min/max tick labels and a legend.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {} L{PAD} {} L{} {}" fill="none" stroke="black"/>"#,
        PAD,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" text-anchor="middle">{x0:.4}</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.4}</text>"#, W - PAD, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, PAD - 4.0, H - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, PAD - 4.0, PAD + 4.0);
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        for (j, &(x, y)) in ser.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).enumerate() {
            let _ = write!(d, "{}{:.2} {:.2} ", if j == 0 { "M" } else { "L" }, sx(x), sy(y));
        }
        let dash = if ser.dashed { r#" stroke-dasharray="5 3""# } else { "" };
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, d.trim_end());
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            W - PAD + 4.0 - 120.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Mean imagined reward and evaluation score against training step.
pub fn reward_curves(rows: &[MetricsRow]) -> String {
    let reward = rows
        .iter()
        .filter_map(|r| r.behavior.map(|b| (r.step as f64, b.mean_reward)))
        .collect();
    let score = rows.iter().filter_map(|r| r.eval_score.map(|s| (r.step as f64, s))).collect();
    line_chart(
        "Reward curves",
        "step",
        &[
            Series {
                label: "imagined reward".into(),
                points: reward,
                dashed: false,
            },
            Series {
                label: "eval score".into(),
                points: score,
                dashed: true,
            },
        ],
    )
}

/// One line per (task, layer) gate against training step.
pub fn gate_trajectories(rows: &[MetricsRow]) -> String {
    let mut series: Vec<Series> = Vec::new();
    if let Some(first) = rows.first() {
        for (task, gates) in &first.gates {
            for l in 0..gates.len() {
                let points = rows
                    .iter()
                    .filter_map(|r| {
                        r.gates
                            .iter()
                            .find(|(t, _)| t == task)
                            .and_then(|(_, g)| g.get(l))
                            .map(|v| (r.step as f64, *v))
                    })
                    .collect();
                series.push(Series {
                    label: format!("{task} layer {l}"),
                    points,
                    dashed: l % 2 == 1,
                });
            }
        }
    }
    line_chart("Gate values", "step", &series)
}

/// Real (solid) against decoded (dashed) observation components over one
/// evaluation episode.
pub fn observation_traces(trace: &[StepTrace], dims: usize) -> String {
    let mut series = Vec::new();
    for d in 0..dims {
        series.push(Series {
            label: format!("obs[{d}]"),
            points: trace.iter().enumerate().map(|(t, s)| (t as f64, s.obs[d])).collect(),
            dashed: false,
        });
        series.push(Series {
            label: format!("decoded[{d}]"),
            points: trace
                .iter()
                .enumerate()
                .filter_map(|(t, s)| s.predicted_obs.get(d).map(|v| (t as f64, *v)))
                .collect(),
            dashed: true,
        });
    }
    line_chart("Observed vs decoded", "t", &series)
}
