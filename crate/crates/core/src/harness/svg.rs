use std::fmt::Write;

use crate::metrics::ReliabilityRow;

const SIZE: f64 = 360.0;
const PAD: f64 = 48.0;

fn px(v: f64) -> f64 {
    PAD + v * SIZE
}

fn py(v: f64) -> f64 {
    PAD + (1.0 - v) * SIZE
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reliability diagram: one bar per nonempty bin spanning its confidence
/// range with height equal to its accuracy, a marker at the mean
/// confidence, and the identity diagonal.
pub fn reliability_svg(rows: &[ReliabilityRow], title: &str) -> String {
    let total = PAD * 2.0 + SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{total}" height="{total}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, total / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#333"/>"##
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, px(v), py(0.0) + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, px(0.0) - 6.0, py(v) + 4.0);
    }
    for row in rows {
        let (Some(lo), Some(hi), Some(acc), Some(conf)) = (row.lower, row.upper, row.accuracy, row.confidence) else {
            continue;
        };
        let width = ((hi - lo) * SIZE).max(1.0);
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab7" fill-opacity="0.8" stroke="#1f3f66"/>"##,
            px(lo),
            py(acc),
            width,
            acc * SIZE
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#c0392b" stroke-width="2"/>"##,
            px(lo),
            py(conf),
            px(lo) + width,
            py(conf)
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#777" stroke-dasharray="4 3"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">confidence</text>"#, total / 2.0, total - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">accuracy</text>"#,
        total / 2.0
    );
    s.push_str("</svg>\n");
    s
}
