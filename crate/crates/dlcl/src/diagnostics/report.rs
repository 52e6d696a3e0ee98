//! Per-layer gradient norms: the vanishing-gradient evidence record.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, TransformerModel};
use crate::nn::ForwardCtx;
use crate::tensor::Graph;

/// Per-layer gradient norms from one forward/backward pass.
///
/// `layer_norms[l-1]` holds `||dE/dx_l||` for complete layer l in 1..=L;
/// `embedding_norm` is `||dE/dy_0||`. The report is marked divergent when the
/// loss or any recorded norm is non-finite.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub layer_norms: Vec<f64>,
    pub embedding_norm: f64,
    pub bottom_top_ratio: f64,
    pub loss: f64,
    pub divergent: bool,
    pub config: ModelConfig,
    pub seed: u64,
}

/// One forward + backward on `batch` with dropout disabled and the training
/// loss (label smoothing included), recording `||dE/dx_l||` per layer input.
pub fn probe_gradient_norms(
    model: &TransformerModel,
    batch: &Batch,
    seed: u64,
) -> Result<GradientReport> {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval();
    model.store.zero_grads();
    let (out, trace) = model.forward_loss_with_trace(&mut g, batch, &mut ctx)?;
    let loss = out.loss.item();
    g.backward(&out.loss)?;

    let norm_of = |t: &crate::tensor::Tensor| -> f64 {
        match g.grad(t) {
            Some(buf) => buf.iter().map(|v| v * v).sum::<f64>().sqrt(),
            None => 0.0,
        }
    };
    let layer_norms: Vec<f64> = trace.x.iter().map(norm_of).collect();
    let embedding_norm = norm_of(&trace.y[0]);
    let bottom = *layer_norms.first().expect("depth >= 1");
    let top = *layer_norms.last().expect("depth >= 1");
    let bottom_top_ratio = bottom / top;
    let divergent = !loss.is_finite()
        || !embedding_norm.is_finite()
        || layer_norms.iter().any(|n| !n.is_finite());

    Ok(GradientReport {
        layer_norms,
        embedding_norm,
        bottom_top_ratio,
        loss,
        divergent,
        config: model.cfg.clone(),
        seed,
    })
}

/// Renders the report CSV: header `layer,grad_norm`, the embedding as layer
/// 0, then layers 1..=L in order. Divergent reports carry a trailing
/// `# divergent` comment line.
pub fn render_report_csv(report: &GradientReport) -> String {
    let mut out = String::from("layer,grad_norm\n");
    let _ = writeln!(out, "0,{}", report.embedding_norm);
    for (i, n) in report.layer_norms.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, n);
    }
    if report.divergent {
        out.push_str("# divergent\n");
    }
    out
}

pub fn export_report_csv(report: &GradientReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_report_csv(report))?;
    Ok(())
}

/// Parses a report CSV back into `(layer, grad_norm)` rows plus the divergent
/// flag. Floats are written in shortest round-trip form, so parsing is exact.
pub fn read_report_csv(text: &str) -> Result<(Vec<(usize, f64)>, bool)> {
    let mut rows = Vec::new();
    let mut divergent = false;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "layer,grad_norm" {
                return Err(Error::Config(format!("bad report header '{line}'")));
            }
            continue;
        }
        if line.starts_with('#') {
            divergent = line.contains("divergent");
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (layer, norm) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("bad report row '{line}'")))?;
        let layer: usize = layer
            .parse()
            .map_err(|_| Error::Config(format!("bad layer index '{layer}'")))?;
        let norm: f64 = norm
            .parse()
            .map_err(|_| Error::Config(format!("bad norm value '{norm}'")))?;
        rows.push((layer, norm));
    }
    Ok((rows, divergent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AggregationMode, NormPlacement, BOS, EOS};

    fn probe_cfg(depth: usize, norm: NormPlacement) -> ModelConfig {
        ModelConfig {
            encoder_depth: depth,
            decoder_depth: 1,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            norm,
            aggregation: AggregationMode::Standard,
            src_vocab: 8,
            tgt_vocab: 8,
            residual_dropout: 0.0,
            attn_dropout: 0.0,
            ffn_dropout: 0.0,
            label_smoothing: 0.1,
        }
    }

    fn probe_batch() -> Batch {
        Batch {
            b: 1,
            t_src: 3,
            t_tgt: 3,
            src: vec![4, 6, EOS],
            src_pad: vec![false; 3],
            tgt_in: vec![BOS, 4, 6],
            tgt_out: vec![4, 6, EOS],
        }
    }

    #[test]
    fn single_layer_report_has_one_layer_entry_plus_embedding() {
        let model = TransformerModel::new(probe_cfg(1, NormPlacement::PreNorm), 1).unwrap();
        let report = probe_gradient_norms(&model, &probe_batch(), 1).unwrap();
        assert_eq!(report.layer_norms.len(), 1);
        assert!(report.embedding_norm.is_finite());
        assert!(!report.divergent);
    }

    #[test]
    fn prenorm_with_zeroed_branches_passes_gradient_unchanged() {
        let model = TransformerModel::new(probe_cfg(4, NormPlacement::PreNorm), 5).unwrap();
        for layer in &model.encoder.layers {
            layer.self_attn.wo.w.set_value(vec![0.0; 64]);
            layer.ffn.w2.w.set_value(vec![0.0; 16 * 8]);
        }
        let report = probe_gradient_norms(&model, &probe_batch(), 5).unwrap();
        let first = report.layer_norms[0];
        for &n in &report.layer_norms {
            assert!((n - first).abs() <= 1e-9 * first.max(1.0), "{n} vs {first}");
        }
        // identity path also reaches the embedding output untouched
        assert!((report.embedding_norm - first).abs() <= 1e-9 * first.max(1.0));
        assert!((report.bottom_top_ratio - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn csv_has_one_row_per_layer_plus_embedding() {
        let model = TransformerModel::new(probe_cfg(2, NormPlacement::PostNorm), 2).unwrap();
        let report = probe_gradient_norms(&model, &probe_batch(), 2).unwrap();
        let csv = render_report_csv(&report);
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 4, "header + 3 data rows: {csv}");
        assert_eq!(rows[0], "layer,grad_norm");
        assert!(rows[1].starts_with("0,"));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let model = TransformerModel::new(probe_cfg(3, NormPlacement::PreNorm), 3).unwrap();
        let report = probe_gradient_norms(&model, &probe_batch(), 3).unwrap();
        let csv = render_report_csv(&report);
        let (rows, divergent) = read_report_csv(&csv).unwrap();
        assert!(!divergent);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0], (0, report.embedding_norm));
        for (i, &n) in report.layer_norms.iter().enumerate() {
            assert_eq!(rows[i + 1], (i + 1, n), "exact shortest-roundtrip parse");
        }
    }

    #[test]
    fn divergent_report_carries_footer() {
        let model = TransformerModel::new(probe_cfg(1, NormPlacement::PreNorm), 1).unwrap();
        let mut report = probe_gradient_norms(&model, &probe_batch(), 1).unwrap();
        report.divergent = true;
        let csv = render_report_csv(&report);
        assert!(csv.trim_end().ends_with("# divergent"));
        let (rows, divergent) = read_report_csv(&csv).unwrap();
        assert!(divergent);
        assert_eq!(rows.len(), 2);
    }
}
