//! Standalone SVG heatmaps of sweep results: color-mapped (N, SNR) grid
//! with axis labels and an optional N*SNR^2 = c boundary overlay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sweep::CellResult;

/// Five-stop linear ramp (dark violet -> blue -> teal -> green -> yellow),
/// sampled from the common viridis palette.
pub const RAMP: [(f64, [u8; 3]); 5] = [
    (0.00, [68, 1, 84]),
    (0.25, [59, 82, 139]),
    (0.50, [33, 145, 140]),
    (0.75, [94, 201, 98]),
    (1.00, [253, 231, 37]),
];

/// Interpolate the ramp at t in [0, 1].
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    for w in RAMP.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            let mut c = [0u8; 3];
            for i in 0..3 {
                c[i] = (c0[i] as f64 + f * (c1[i] as f64 - c0[i] as f64)).round() as u8;
            }
            return c;
        }
    }
    RAMP[4].1
}

fn metric_value(c: &CellResult, metric: &str) -> Result<f64> {
    Ok(match metric {
        "clean_acc" => c.clean_acc,
        "robust_acc" => c.robust_acc,
        "iters" => c.iters as f64,
        "wall_ms" => c.wall_ms as f64,
        "converged" => c.converged as u8 as f64,
        other => {
            return Err(Error::Config(format!(
                "unknown metric '{other}' (expected clean_acc, robust_acc, iters, wall_ms, or converged)"
            )))
        }
    })
}

struct GridData {
    n_values: Vec<usize>,
    snr_values: Vec<f64>,
    /// values[row][col], row indexed by snr, col by n; seed-averaged.
    values: Vec<Vec<f64>>,
}

fn assemble_grid(cells: &[CellResult], metric: &str) -> Result<GridData> {
    if cells.is_empty() {
        return Err(Error::Config("no cells to plot".into()));
    }
    let mut n_values: Vec<usize> = cells.iter().map(|c| c.n).collect();
    n_values.sort_unstable();
    n_values.dedup();
    let mut snr_values: Vec<f64> = cells.iter().map(|c| c.snr).collect();
    snr_values.sort_by(f64::total_cmp);
    snr_values.dedup_by(|a, b| a == b);
    // average over seeds per (n, snr)
    let mut acc: BTreeMap<(usize, u64), (f64, usize)> = BTreeMap::new();
    for c in cells {
        let key = (c.n, c.snr.to_bits());
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += metric_value(c, metric)?;
        e.1 += 1;
    }
    let mut missing = Vec::new();
    let mut values = vec![vec![0.0; n_values.len()]; snr_values.len()];
    for (si, &snr) in snr_values.iter().enumerate() {
        for (ni, &n) in n_values.iter().enumerate() {
            match acc.get(&(n, snr.to_bits())) {
                Some(&(sum, count)) => values[si][ni] = sum / count as f64,
                None => missing.push(format!("(n={n}, snr={snr})")),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "ragged grid; missing cells: {}",
            missing.join(", ")
        )));
    }
    Ok(GridData { n_values, snr_values, values })
}

/// Fraction of the axis at which a continuous n lands, interpolating
/// between the (ordinally spaced) tick positions.
fn ordinal_pos(values: &[f64], x: f64) -> Option<f64> {
    let k = values.len();
    if k == 1 {
        return (x == values[0]).then_some(0.5);
    }
    if x < values[0] || x > values[k - 1] {
        return None;
    }
    for i in 0..k - 1 {
        if x <= values[i + 1] {
            let f = (x - values[i]) / (values[i + 1] - values[i]);
            // cell centers sit at (i + 0.5) / k
            return Some((i as f64 + 0.5 + f) / k as f64);
        }
    }
    None
}

const CELL: f64 = 48.0;
const MARGIN_LEFT: f64 = 78.0;
const MARGIN_BOTTOM: f64 = 58.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_RIGHT: f64 = 30.0;

/// Render the heatmap as an SVG document. Metric values inside [0, 1] are
/// mapped onto the fixed domain [0, 1]; anything else is min-max scaled.
pub fn render_heatmap(
    cells: &[CellResult],
    metric: &str,
    overlay_c: Option<f64>,
) -> Result<String> {
    let grid = assemble_grid(cells, metric)?;
    let flat: Vec<f64> = grid.values.iter().flatten().copied().collect();
    let (lo, hi) = flat
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let (dom_lo, dom_hi) = if lo >= 0.0 && hi <= 1.0 { (0.0, 1.0) } else { (lo, hi) };
    let scale = |v: f64| {
        if dom_hi > dom_lo {
            (v - dom_lo) / (dom_hi - dom_lo)
        } else {
            0.5
        }
    };

    let cols = grid.n_values.len();
    let rows = grid.snr_values.len();
    let plot_w = cols as f64 * CELL;
    let plot_h = rows as f64 * CELL;
    let width = MARGIN_LEFT + plot_w + MARGIN_RIGHT;
    let height = MARGIN_TOP + plot_h + MARGIN_BOTTOM;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{metric}</text>"#,
        MARGIN_LEFT + plot_w / 2.0
    );

    // cells: snr increases upward (row 0 at the bottom)
    for (si, row) in grid.values.iter().enumerate() {
        let y = MARGIN_TOP + plot_h - (si as f64 + 1.0) * CELL;
        for (ni, &v) in row.iter().enumerate() {
            let x = MARGIN_LEFT + ni as f64 * CELL;
            let [r, g, b] = ramp_color(scale(v));
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{CELL}" height="{CELL}" fill="rgb({r},{g},{b})" stroke="white" stroke-width="1"><title>n={}, snr={}, {metric}={v}</title></rect>"#,
                grid.n_values[ni], grid.snr_values[si]
            );
        }
    }

    // axis tick labels
    for (ni, &n) in grid.n_values.iter().enumerate() {
        let x = MARGIN_LEFT + (ni as f64 + 0.5) * CELL;
        let y = MARGIN_TOP + plot_h + 18.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{n}</text>"#
        );
    }
    for (si, &snr) in grid.snr_values.iter().enumerate() {
        let x = MARGIN_LEFT - 8.0;
        let y = MARGIN_TOP + plot_h - (si as f64 + 0.5) * CELL + 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="12" text-anchor="end">{snr}</text>"#
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle">N</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        MARGIN_TOP + plot_h + 40.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 20 {:.1})">SNR</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    if let Some(c) = overlay_c {
        if !(c > 0.0) {
            return Err(Error::Config(format!("overlay constant must be > 0, got {c}")));
        }
        let n_axis: Vec<f64> = grid.n_values.iter().map(|&n| n as f64).collect();
        let n_lo = n_axis[0];
        let n_hi = n_axis[n_axis.len() - 1];
        let mut pts = Vec::new();
        let samples = 256;
        for k in 0..=samples {
            let n = n_lo + (n_hi - n_lo) * k as f64 / samples as f64;
            let snr = (c / n).sqrt();
            let (Some(fx), Some(fy)) =
                (ordinal_pos(&n_axis, n), ordinal_pos(&grid.snr_values, snr))
            else {
                continue;
            };
            let x = MARGIN_LEFT + fx * plot_w;
            let y = MARGIN_TOP + plot_h - fy * plot_h;
            pts.push(format!("{x:.2},{y:.2}"));
        }
        if !pts.is_empty() {
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="red" stroke-width="2" stroke-dasharray="6,4"><title>N*SNR^2 = {c}</title></polyline>"#,
                pts.join(" ")
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_heatmap(
    cells: &[CellResult],
    metric: &str,
    out_path: &Path,
    overlay_c: Option<f64>,
) -> Result<()> {
    let svg = render_heatmap(cells, metric, overlay_c)?;
    std::fs::write(out_path, svg)?;
    Ok(())
}
