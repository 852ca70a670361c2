//! Learning-curve export: CSV series and a dependency-free SVG chart of
//! return ± std and coherency against step.

use std::fmt::Write;

use super::metrics::MetricsRecord;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub mean: f64,
    pub std: f64,
    pub coherency: Option<f64>,
}

/// Evaluation points (start and eval rows) in log order.
pub fn curve(records: &[MetricsRecord]) -> Vec<CurvePoint> {
    records
        .iter()
        .filter(|r| matches!(r.event.as_str(), "start" | "eval"))
        .filter_map(|r| {
            Some(CurvePoint {
                step: r.step,
                mean: r.eval_mean?,
                std: r.eval_std.unwrap_or(0.0),
                coherency: r.coherency,
            })
        })
        .filter(|p| p.mean.is_finite())
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("step,mean,std,lower,upper,coherency\n");
    for p in points {
        let c = p.coherency.map_or_else(String::new, |c| format!("{c:e}"));
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e},{c}", p.step, p.mean, p.std, p.mean - p.std, p.mean + p.std);
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

/// Two stacked panels: return with a ±1 std band, and coherency. A dashed
/// vertical marker is drawn at `marker_step` when given.
pub fn curve_svg(points: &[CurvePoint], title: &str, marker_step: Option<u64>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif" font-size="11">"#,
        2.0 * H
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="20" font-size="14">{}</text>"#, escape(title));
    if points.is_empty() {
        let _ = writeln!(s, r#"<text x="{PAD}" y="60">no evaluations recorded</text></svg>"#);
        return s;
    }
    let x_max = points.iter().map(|p| p.step).max().unwrap_or(0).max(1) as f64;
    let sx = |step: f64| PAD + (W - 2.0 * PAD) * step / x_max;
    let lo = points.iter().map(|p| p.mean - p.std).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.mean + p.std).fold(f64::NEG_INFINITY, f64::max);
    panel(&mut s, 0.0, "return", lo, hi, x_max, marker_step.map(|m| sx(m as f64)), |s, sy| {
        let upper: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean + p.std))).collect();
        let lower: Vec<String> = points.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean - p.std))).collect();
        let _ = writeln!(s, r##"<polygon points="{} {}" fill="#1f77b4" fill-opacity="0.2"/>"##, upper.join(" "), lower.join(" "));
        let line: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean))).collect();
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, line.join(" "));
    });
    let coh: Vec<(f64, f64)> = points.iter().filter_map(|p| Some((p.step as f64, p.coherency?))).collect();
    let (clo, chi) = coh.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, c)| (a.min(c), b.max(c)));
    let (clo, chi) = if coh.is_empty() { (0.0, 1.0) } else { (clo, chi) };
    panel(&mut s, H, "coherency", clo, chi, x_max, marker_step.map(|m| sx(m as f64)), |s, sy| {
        if !coh.is_empty() {
            let line: Vec<String> = coh.iter().map(|&(x, c)| format!("{:.2},{:.2}", sx(x), sy(c))).collect();
            let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#2ca02c" stroke-width="2"/>"##, line.join(" "));
        }
    });
    s.push_str("</svg>\n");
    s
}

#[allow(clippy::too_many_arguments)]
fn panel(s: &mut String, top: f64, label: &str, lo: f64, hi: f64, x_max: f64, marker: Option<f64>, body: impl FnOnce(&mut String, &dyn Fn(f64) -> f64)) {
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let y0 = top + H - PAD;
    let y1 = top + PAD;
    let sy = move |v: f64| y0 - (y0 - y1) * (v - lo) / (hi - lo);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, W - PAD);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{y0}" x2="{PAD}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="4" y="{}">{label}</text>"#, y1 - 8.0);
    let _ = writeln!(s, r#"<text x="4" y="{y1}">{hi:.3}</text><text x="4" y="{y0}">{lo:.3}</text>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}">step {x_max}</text>"#, W - PAD - 40.0, y0 + 16.0);
    body(s, &sy);
    if let Some(x) = marker {
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{y1}" stroke="#d4a017" stroke-width="2" stroke-dasharray="6,4"/>"##
        );
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_band_and_marker() {
        let pts = vec![
            CurvePoint { step: 0, mean: 1.0, std: 0.5, coherency: Some(0.9) },
            CurvePoint { step: 10, mean: 2.0, std: 0.2, coherency: Some(0.8) },
        ];
        let svg = curve_svg(&pts, "run", Some(5));
        assert!(svg.contains("<polygon") && svg.contains("stroke-dasharray"));
        assert_eq!(curve_csv(&pts).lines().count(), 3);
    }
}
