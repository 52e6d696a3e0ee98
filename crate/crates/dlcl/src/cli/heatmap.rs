//! Aggregation-weight extraction with the per-row masking rule used for
//! weight heatmaps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::train::Checkpoint;

/// One aggregation edge: producer `from` (0 = embedding output) feeding the
/// input of layer `to`, with the display mask applied.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRow {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
    pub masked: bool,
}

/// A point is masked when its absolute value is below 0.1 or below 5% of the
/// row's maximum absolute value.
pub fn mask_row(weights: &[f64]) -> Vec<bool> {
    let row_max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    weights
        .iter()
        .map(|w| w.abs() < 0.1 || w.abs() < 0.05 * row_max)
        .collect()
}

/// Rebuilds the ragged weight table of one side ("encoder" or "decoder")
/// from checkpoint entries named `{side}.agg.w.{to}.{from}`.
pub fn extract_weight_rows(ck: &Checkpoint, side: &str) -> Vec<Vec<f64>> {
    let prefix = format!("{side}.agg.w.");
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (name, _, data) in &ck.entries {
        if let Some(rest) = name.strip_prefix(&prefix) {
            if let Some((to, from)) = rest.split_once('.') {
                if let (Ok(to), Ok(from)) = (to.parse::<usize>(), from.parse::<usize>()) {
                    cells.push((to, from, data[0]));
                }
            }
        }
    }
    let depth = cells.iter().map(|&(to, _, _)| to).max().unwrap_or(0);
    let mut rows: Vec<Vec<f64>> = (1..=depth).map(|to| vec![0.0; to]).collect();
    for (to, from, w) in cells {
        rows[to - 1][from] = w;
    }
    rows
}

/// Renders `from,to,weight,masked` rows for the encoder and decoder weight
/// tables, one `# <side>` comment line ahead of each section. Errors when
/// the checkpoint holds no aggregation weights at all.
pub fn render_heatmap_csv(ck: &Checkpoint) -> Result<String> {
    let mut out = String::from("from,to,weight,masked\n");
    let mut any = false;
    for side in ["encoder", "decoder"] {
        let rows = extract_weight_rows(ck, side);
        if rows.is_empty() {
            continue;
        }
        any = true;
        let _ = writeln!(out, "# {side}");
        for (r, row) in rows.iter().enumerate() {
            let masks = mask_row(row);
            for (from, (&w, &m)) in row.iter().zip(&masks).enumerate() {
                let _ = writeln!(out, "{},{},{},{}", from, r + 1, w, m);
            }
        }
    }
    if !any {
        return Err(Error::Config(
            "checkpoint holds no aggregation weights (not a DLCL model)".into(),
        ));
    }
    Ok(out)
}
