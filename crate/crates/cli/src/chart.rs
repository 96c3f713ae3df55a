//! Grouped bar chart of a scale histogram as standalone SVG.

use std::fmt::Write as _;

use mpsr::fewshot::ScaleHistogram;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

fn edge_label(e: f64) -> String {
    if e.is_finite() {
        format!("{e}")
    } else {
        "inf".into()
    }
}

pub fn histogram_svg(h: &ScaleHistogram) -> String {
    let (width, height) = (900.0, 420.0);
    let (left, right, top, bottom) = (60.0, 160.0, 30.0, 70.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let nbins = h.edges.len() - 1;
    let nclasses = h.counts.len().max(1);
    let max = h.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let slot = plot_w / nbins.max(1) as f64;
    let bar = slot * 0.8 / nclasses as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">Object scales after resizing (shorter side {})</text>"#,
        left + plot_w / 2.0,
        h.policy.shorter
    );
    for (c, row) in h.counts.iter().enumerate() {
        let color = PALETTE[c % PALETTE.len()];
        for (b, &n) in row.iter().enumerate() {
            let bh = n as f64 / max * plot_h;
            let x = left + b as f64 * slot + slot * 0.1 + c as f64 * bar;
            let y = top + plot_h - bh;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{bar:.2}" height="{bh:.2}" fill="{color}"><title>{}: {n}</title></rect>"#,
                h.class_names[c]
            );
        }
        let ly = top + 14.0 * c as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{ly}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            width - right + 15.0,
            width - right + 30.0,
            ly + 9.0,
            h.class_names[c]
        );
    }
    let axis_y = top + plot_h;
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{axis_y}" stroke="black"/>"#,
        left + plot_w
    );
    for b in 0..nbins {
        let x = left + (b as f64 + 0.5) * slot;
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="end" transform="rotate(-45 {x:.2} {})">{}-{}</text>"#,
            axis_y + 14.0,
            axis_y + 14.0,
            edge_label(h.edges[b]),
            edge_label(h.edges[b + 1])
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="end">0</text>"#,
        left - 5.0,
        top + 4.0,
        max,
        left - 5.0,
        axis_y
    );
    s.push_str("</svg>\n");
    s
}
