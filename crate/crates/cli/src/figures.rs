//! Table and figure emission for ablation sweeps.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::AblationRow;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Markdown table with one row per (variant, T) cell.
pub fn table_markdown(rows: &[AblationRow]) -> String {
    let mut s =
        String::from("| variant | T | NMI mean | NMI std | runs |\n|---|---:|---:|---:|---:|\n");
    for r in rows {
        writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} | {} |",
            r.variant,
            r.t,
            r.nmi_mean,
            r.nmi_std,
            r.nmi.len()
        )
        .expect("write to string");
    }
    s
}

/// Mean NMI against T, one polyline per variant, with ±std whiskers.
pub fn sweep_svg(rows: &[AblationRow]) -> String {
    let (w, h, m) = (480.0, 320.0, 40.0);
    let mut series: BTreeMap<&str, Vec<&AblationRow>> = BTreeMap::new();
    for r in rows {
        series.entry(r.variant.as_str()).or_default().push(r);
    }
    let t_max = rows.iter().map(|r| r.t).max().unwrap_or(1).max(1) as f64;
    let px = |t: usize| m + t as f64 / t_max * (w - 2.0 * m);
    let py = |v: f64| h - m - v.clamp(0.0, 1.0) * (h - 2.0 * m);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .expect("write to string");
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("write to string");
    writeln!(
        s,
        r#"<path d="M{m} {} V{} H{}" stroke="black" fill="none"/>"#,
        m,
        h - m,
        w - m
    )
    .expect("write to string");
    for tick in [0.0, 0.5, 1.0] {
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{tick:.1}</text>"#,
            m - 4.0,
            py(tick) + 3.0
        )
        .expect("write to string");
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11">T</text>"#,
        w - m + 6.0,
        h - m + 4.0
    )
    .expect("write to string");
    writeln!(
        s,
        r#"<text x="4" y="{}" font-size="11">NMI</text>"#,
        m - 10.0
    )
    .expect("write to string");

    for (k, (name, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by_key(|r| r.t);
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, r)| {
                format!(
                    "{}{:.1} {:.1}",
                    if i == 0 { 'M' } else { 'L' },
                    px(r.t),
                    py(r.nmi_mean)
                )
            })
            .collect();
        writeln!(
            s,
            r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
            path.join(" ")
        )
        .expect("write to string");
        for r in &pts {
            let x = px(r.t);
            writeln!(
                s,
                r#"<path d="M{x:.1} {:.1} V{:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                py(r.nmi_mean - r.nmi_std),
                py(r.nmi_mean + r.nmi_std),
                py(r.nmi_mean)
            )
            .expect("write to string");
            writeln!(
                s,
                r#"<text x="{x:.1}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
                h - m + 14.0,
                r.t
            )
            .expect("write to string");
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#,
            w - m - 110.0,
            m + 14.0 * k as f64
        )
        .expect("write to string");
    }
    s.push_str("</svg>\n");
    s
}
