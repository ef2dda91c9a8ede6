//! Minimal SVG output for the gap box plot and stacked EV profiles.

use std::fmt::Write;

use aggflex::GapSummary;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

const PALETTE: [&str; 10] =
    ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"];

struct Frame {
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-12);
        H - PAD - (v - self.y_min) / span * (H - 2.0 * PAD)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(out, r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD);
    let _ = writeln!(out, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    for i in 0..=4 {
        let v = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 4.0;
        let y = frame.y(v);
        let _ = writeln!(out, r#"<line x1="{}" y1="{y:.2}" x2="{PAD}" y2="{y:.2}" stroke="black"/>"#, PAD - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, PAD - 6.0, y + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
}

/// Box plot of the gap versus the number of base sets.
pub fn gap_boxplot(summary: &[GapSummary]) -> String {
    let rows: Vec<&GapSummary> = summary.iter().filter(|s| s.count > 0).collect();
    let lo = rows.iter().map(|s| s.min).fold(0.0_f64, f64::min);
    let hi = rows.iter().map(|s| s.max).fold(lo + 1e-9, f64::max);
    let frame = Frame { y_min: lo, y_max: hi * 1.05 };
    let mut out = String::new();
    header(&mut out, "Suboptimality gap versus number of base sets");
    axes(&mut out, &frame, "K", "gap [%]");
    let slot = (W - 2.0 * PAD) / rows.len().max(1) as f64;
    for (j, s) in rows.iter().enumerate() {
        let cx = PAD + slot * (j as f64 + 0.5);
        let half = slot * 0.25;
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            frame.y(s.min),
            frame.y(s.max)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            frame.y(s.q3),
            2.0 * half,
            (frame.y(s.q1) - frame.y(s.q3)).max(0.5)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-width="2"/>"##,
            cx - half,
            frame.y(s.median),
            cx + half,
            frame.y(s.median)
        );
        for v in [s.min, s.max] {
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
                cx - half / 2.0,
                frame.y(v),
                cx + half / 2.0,
                frame.y(v)
            );
        }
        let _ = writeln!(out, r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 16.0, s.k);
    }
    out.push_str("</svg>\n");
    out
}

/// Stacked bars of per-EV power profiles, one bar per period.
pub fn stacked_profiles(profiles: &[Vec<f64>], title: &str) -> String {
    let t = profiles.first().map_or(0, Vec::len);
    let totals: Vec<f64> = (0..t).map(|c| profiles.iter().map(|p| p[c].max(0.0)).sum()).collect();
    let frame = Frame { y_min: 0.0, y_max: totals.iter().copied().fold(1e-9, f64::max) * 1.05 };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, "period", "power [kW]");
    let slot = (W - 2.0 * PAD) / t.max(1) as f64;
    for c in 0..t {
        let x = PAD + slot * c as f64 + slot * 0.1;
        let mut base = 0.0;
        for (i, p) in profiles.iter().enumerate() {
            let v = p[c].max(0.0);
            if v <= 0.0 {
                continue;
            }
            let (y0, y1) = (frame.y(base), frame.y(base + v));
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>EV {i}: {v:.3} kW</title></rect>"#,
                slot * 0.8,
                y0 - y1,
                PALETTE[i % PALETTE.len()]
            );
            base += v;
        }
        let _ = writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">{c}</text>"#, x + slot * 0.4, H - PAD + 16.0);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxplot_has_one_box_per_k() {
        let s = |k| GapSummary { k, count: 3, failures: 0, min: 0.0, q1: 1.0, median: 2.0, q3: 3.0, max: 4.0 };
        let svg = gap_boxplot(&[s(1), s(2), s(3)]);
        assert_eq!(svg.matches("<rect x=").count(), 3);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn stacked_bars_skip_zero_entries() {
        let svg = stacked_profiles(&[vec![1.0, 0.0], vec![2.0, 1.0]], "profiles");
        assert_eq!(svg.matches("<title>EV").count(), 3);
    }
}
