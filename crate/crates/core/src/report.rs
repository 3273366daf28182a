//! CSV tables and small SVG plots built from stage outputs.

use std::fmt::Write as _;

use crate::probing::{CrossSourceMatrix, ProbeGrid};
use crate::selection::{Evaluation, ScoreReport};

/// One row per (t, layer): probe AUC, noised-latent baseline and delta.
pub fn probe_table_csv(grid: &ProbeGrid) -> String {
    let mut s = String::from("t,layer,auc,baseline_auc,delta\n");
    for d in &grid.deltas {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", d.t, d.layer, d.auc, d.baseline_auc, d.delta);
    }
    s
}

/// Train source by row, test source by column.
pub fn cross_source_csv(m: &CrossSourceMatrix) -> String {
    let mut s = String::from("train\\test");
    for src in &m.sources {
        let _ = write!(s, ",{src}");
    }
    s.push('\n');
    for (i, src) in m.sources.iter().enumerate() {
        let _ = write!(s, "{src}");
        for a in &m.auc[i] {
            let _ = write!(s, ",{a:.6}");
        }
        s.push('\n');
    }
    s
}

/// Success rate and mean pass counts per mode.
pub fn cost_table_csv(eval: &Evaluation) -> String {
    let mut s = String::from("mode,prompts,successes,success_rate,mean_denoising_passes,mean_scoring_passes\n");
    for m in &eval.summaries {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.3},{:.3}",
            m.mode, m.prompts, m.successes, m.success_rate, m.mean_denoising_passes, m.mean_scoring_passes
        );
    }
    s
}

/// Per-prompt pass counts.
pub fn prompt_costs_csv(eval: &Evaluation) -> String {
    let mut s = String::from("mode,prompt,winner,plausible,denoising_passes,scoring_passes\n");
    for r in &eval.results {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.mode, r.prompt, r.winner, r.plausible as u8, r.ledger.denoising_passes, r.ledger.scoring_passes
        );
    }
    s
}

fn colour(v: f64, lo: f64, hi: f64) -> String {
    let x = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let r = (255.0 * x) as u8;
    let b = (255.0 * (1.0 - x)) as u8;
    format!("rgb({r},64,{b})")
}

/// Delta-AUC heatmap: layers across, timesteps down.
pub fn probe_heatmap_svg(grid: &ProbeGrid) -> String {
    let (cw, ch, left, top) = (70.0, 40.0, 60.0, 30.0);
    let w = left + cw * grid.layers.len() as f64 + 10.0;
    let h = top + ch * grid.timesteps.len() as f64 + 10.0;
    let lo = grid.deltas.iter().map(|d| d.delta).fold(f64::INFINITY, f64::min);
    let hi = grid.deltas.iter().map(|d| d.delta).fold(f64::NEG_INFINITY, f64::max);
    let mut s =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"11\">\n");
    for (j, l) in grid.layers.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"20\">layer {l}</text>", left + cw * j as f64 + 8.0);
    }
    for (i, t) in grid.timesteps.iter().enumerate() {
        let y = top + ch * i as f64;
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\">t={t}</text>", y + ch / 2.0 + 4.0);
        for (j, l) in grid.layers.iter().enumerate() {
            let Some(d) = grid.deltas.iter().find(|d| d.t == *t && d.layer == *l) else {
                continue;
            };
            let x = left + cw * j as f64;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" fill=\"white\">{:+.3}</text>",
                colour(d.delta, lo, hi),
                x + 10.0,
                y + ch / 2.0 + 4.0,
                d.delta
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart of the first-checkpoint score spread histogram.
pub fn spread_histogram_svg(report: &ScoreReport) -> String {
    let (bw, hmax, left, bottom) = (30.0, 150.0, 40.0, 30.0);
    let n = report.spread_histogram.len();
    let w = left + bw * n as f64 + 10.0;
    let h = hmax + bottom + 10.0;
    let peak = report.spread_histogram.iter().map(|b| b.2).max().unwrap_or(0).max(1) as f64;
    let mut s =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"10\">\n");
    for (i, (lo, _, c)) in report.spread_histogram.iter().enumerate() {
        let bh = hmax * *c as f64 / peak;
        let x = left + bw * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{}\" width=\"{}\" height=\"{bh}\" fill=\"steelblue\"/><text x=\"{x}\" y=\"{}\">{lo:.2}</text>",
            10.0 + hmax - bh,
            bw - 2.0,
            hmax + 24.0
        );
    }
    let _ = writeln!(s, "<text x=\"2\" y=\"20\">{}</text>", peak as usize);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probing::{Coordinate, GridDelta, ProbeResult};

    fn grid() -> ProbeGrid {
        let r = |t, layer| ProbeResult {
            coordinate: Coordinate::Grid { t, layer },
            mean_auc: 0.7,
            per_fold_auc: vec![0.7],
            n_samples: 10,
        };
        ProbeGrid {
            timesteps: vec![200],
            layers: vec![2, 4],
            cells: vec![r(200, 2), r(200, 4)],
            baselines: vec![],
            deltas: vec![
                GridDelta {
                    t: 200,
                    layer: 2,
                    auc: 0.7,
                    baseline_auc: 0.6,
                    delta: 0.1,
                },
                GridDelta {
                    t: 200,
                    layer: 4,
                    auc: 0.65,
                    baseline_auc: 0.6,
                    delta: 0.05,
                },
            ],
        }
    }

    #[test]
    fn probe_table_has_a_row_per_cell() {
        let csv = probe_table_csv(&grid());
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("200,4,0.650000,0.600000,0.050000"));
    }

    #[test]
    fn heatmap_is_well_formed() {
        let svg = probe_heatmap_svg(&grid());
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 2);
    }
}
