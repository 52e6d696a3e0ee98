//! Dynamic linear combination of layers: the ragged weight table, the
//! constant-weight presets and the two aggregation rules.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AggregationMode, NormPlacement};
use crate::nn::LayerNormParams;
use crate::tensor::{Graph, ParamStore, Parameter, Tensor};

/// Lower-triangular ragged table of scalars: row l+1 holds the l+1 weights
/// that form layer l+1's input from outputs y_0..y_l. L(L+1)/2 scalars total.
#[derive(Clone)]
pub struct DlclWeights {
    rows: Vec<Vec<Parameter>>,
}

impl DlclWeights {
    pub fn rows(&self) -> &[Vec<Parameter>] {
        &self.rows
    }

    /// Weights feeding layer `row + 1` (0-based row index).
    pub fn row(&self, row: usize) -> &[Parameter] {
        &self.rows[row]
    }

    pub fn depth(&self) -> usize {
        self.rows.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Current values, row by row.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|p| p.value()[0]).collect())
            .collect()
    }
}

/// Builds the weight table for an aggregating mode; `None` for `Standard`.
///
/// All-One freezes every weight at 1; Average freezes row n at 1/n;
/// ResidualPassthrough freezes rows at (0,..,0,1); Learned starts at the
/// Average values with every entry trainable.
pub fn make_weight_preset(
    store: &mut ParamStore,
    prefix: &str,
    mode: AggregationMode,
    layers: usize,
) -> Option<DlclWeights> {
    if !mode.is_aggregating() {
        return None;
    }
    let mut rows = Vec::with_capacity(layers);
    for l in 0..layers {
        let len = l + 1;
        let mut row = Vec::with_capacity(len);
        for k in 0..len {
            let (value, trainable) = match mode {
                AggregationMode::Standard => unreachable!("filtered above"),
                AggregationMode::DlclLearned => (1.0 / len as f64, true),
                AggregationMode::DlclAllOne => (1.0, false),
                AggregationMode::DlclAverage | AggregationMode::DlclAverageNoLn => {
                    (1.0 / len as f64, false)
                }
                AggregationMode::ResidualPassthrough => {
                    ((k == l) as usize as f64, false)
                }
            };
            let p = Parameter::scalar(format!("{prefix}.w.{}.{k}", l + 1), value, trainable);
            store.register(p.clone());
            row.push(p);
        }
        rows.push(row);
    }
    Some(DlclWeights { rows })
}

/// Pre-norm aggregation: `sum_k w_k * LN_k(y_k)` with one layer norm per
/// producer, shared by every consuming row.
pub fn dlcl_combine_pre(
    g: &mut Graph,
    outputs: &[Tensor],
    weights: &[Parameter],
    lns: &[LayerNormParams],
) -> Result<Tensor> {
    if weights.len() != outputs.len() || lns.len() < outputs.len() {
        return Err(Error::Config(format!(
            "aggregation row expects {} entries, got {} weights / {} norms",
            outputs.len(),
            weights.len(),
            lns.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (k, y) in outputs.iter().enumerate() {
        let normed = lns[k].apply(g, y)?;
        let w = g.bind(&weights[k]);
        let term = g.scale(&normed, &w)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(&prev, &term)?,
        });
    }
    Ok(acc.expect("at least one output"))
}

/// Post-norm aggregation: `LN(sum_k w_k * y_k)` with a single layer norm
/// applied outside the weighted sum.
pub fn dlcl_combine_post(
    g: &mut Graph,
    outputs: &[Tensor],
    weights: &[Parameter],
    ln: &LayerNormParams,
) -> Result<Tensor> {
    let sum = weighted_sum(g, outputs, weights)?;
    ln.apply(g, &sum)
}

/// `sum_k w_k * y_k` without any normalization.
pub fn weighted_sum(g: &mut Graph, outputs: &[Tensor], weights: &[Parameter]) -> Result<Tensor> {
    if weights.len() != outputs.len() {
        return Err(Error::Config(format!(
            "aggregation row expects {} entries, got {} weights",
            outputs.len(),
            weights.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (k, y) in outputs.iter().enumerate() {
        let w = g.bind(&weights[k]);
        let term = g.scale(y, &w)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(&prev, &term)?,
        });
    }
    Ok(acc.expect("at least one output"))
}

/// One stack's aggregation state: the weight table plus whichever layer
/// norms the (mode, placement) pair owns.
pub struct LayerAggregator {
    pub mode: AggregationMode,
    pub weights: Option<DlclWeights>,
    /// Pre-norm: one LN per producer y_0..y_{L-1}.
    pub producer_lns: Vec<LayerNormParams>,
    /// Post-norm: one LN per aggregation row.
    pub row_lns: Vec<LayerNormParams>,
}

impl LayerAggregator {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        mode: AggregationMode,
        placement: NormPlacement,
        layers: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weights = make_weight_preset(store, prefix, mode, layers);
        let mut producer_lns = Vec::new();
        let mut row_lns = Vec::new();
        if mode.is_aggregating() && mode.uses_ln() {
            match placement {
                NormPlacement::PreNorm => {
                    for k in 0..layers {
                        producer_lns.push(LayerNormParams::new(
                            store,
                            &format!("{prefix}.ln{k}"),
                            d_model,
                            rng,
                        ));
                    }
                }
                NormPlacement::PostNorm => {
                    for l in 0..layers {
                        row_lns.push(LayerNormParams::new(
                            store,
                            &format!("{prefix}.row_ln{}", l + 1),
                            d_model,
                            rng,
                        ));
                    }
                }
            }
        }
        LayerAggregator {
            mode,
            weights,
            producer_lns,
            row_lns,
        }
    }

    /// Forms the input of layer `row + 1` from the recorded outputs
    /// `ys[0..=row]`.
    pub fn combine(
        &self,
        g: &mut Graph,
        placement: NormPlacement,
        ys: &[Tensor],
        row: usize,
    ) -> Result<Tensor> {
        if !self.mode.is_aggregating() {
            return Ok(ys[row].clone());
        }
        let weights = self.weights.as_ref().expect("aggregating mode has weights");
        let inputs = &ys[..=row];
        if self.mode.uses_ln() {
            match placement {
                NormPlacement::PreNorm => dlcl_combine_pre(g, inputs, weights.row(row), &self.producer_lns),
                NormPlacement::PostNorm => {
                    dlcl_combine_post(g, inputs, weights.row(row), &self.row_lns[row])
                }
            }
        } else {
            weighted_sum(g, inputs, weights.row(row))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn average_preset_rows_for_depth_3() {
        let (mut store, _) = setup();
        let w = make_weight_preset(&mut store, "agg", AggregationMode::DlclAverage, 3).unwrap();
        assert_eq!(w.values(), vec![
            vec![1.0],
            vec![0.5, 0.5],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        ]);
        assert!(w.rows().iter().flatten().all(|p| !p.trainable()));
    }

    #[test]
    fn passthrough_preset_is_trailing_one() {
        let (mut store, _) = setup();
        let w =
            make_weight_preset(&mut store, "agg", AggregationMode::ResidualPassthrough, 3).unwrap();
        assert_eq!(w.values(), vec![
            vec![1.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0, 1.0],
        ]);
    }

    #[test]
    fn all_one_preset_matches_dense_connectivity() {
        let (mut store, _) = setup();
        let w = make_weight_preset(&mut store, "agg", AggregationMode::DlclAllOne, 3).unwrap();
        for row in w.values() {
            assert!(row.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn scalar_count_is_l_times_l_plus_1_over_2() {
        let (mut store, _) = setup();
        for (i, l) in [1usize, 2, 5, 12].iter().enumerate() {
            let w = make_weight_preset(
                &mut store,
                &format!("agg{i}"),
                AggregationMode::DlclLearned,
                *l,
            )
            .unwrap();
            assert_eq!(w.scalar_count(), l * (l + 1) / 2);
            // enumeration check: row r has exactly r entries
            for (r, row) in w.rows().iter().enumerate() {
                assert_eq!(row.len(), r + 1);
            }
        }
    }

    #[test]
    fn standard_mode_has_no_weights() {
        let (mut store, _) = setup();
        assert!(make_weight_preset(&mut store, "agg", AggregationMode::Standard, 3).is_none());
    }

    #[test]
    fn combine_pre_single_input_unit_weight_is_layer_norm() {
        let (mut store, mut rng) = setup();
        let ln = LayerNormParams::new(&mut store, "ln0", 4, &mut rng);
        let w = Parameter::scalar("w", 1.0, false);
        let mut g = Graph::new();
        let y0 = g.constant(vec![0.4, -1.0, 2.0, 0.2], &[1, 1, 4]).unwrap();
        let out = dlcl_combine_pre(&mut g, &[y0.clone()], &[w], std::slice::from_ref(&ln)).unwrap();
        let want = ln.apply(&mut g, &y0).unwrap();
        assert_eq!(out.data(), want.data());
    }

    #[test]
    fn combine_pre_zero_weights_give_zero_tensor() {
        let (mut store, mut rng) = setup();
        let lns = vec![
            LayerNormParams::new(&mut store, "ln0", 2, &mut rng),
            LayerNormParams::new(&mut store, "ln1", 2, &mut rng),
        ];
        let ws = vec![Parameter::scalar("w0", 0.0, false), Parameter::scalar("w1", 0.0, false)];
        let mut g = Graph::new();
        let y0 = g.constant(vec![1.0, 2.0], &[1, 1, 2]).unwrap();
        let y1 = g.constant(vec![-3.0, 5.0], &[1, 1, 2]).unwrap();
        let out = dlcl_combine_pre(&mut g, &[y0, y1], &ws, &lns).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn combine_pre_matches_separate_halves() {
        let (mut store, mut rng) = setup();
        let lns = vec![
            LayerNormParams::new(&mut store, "ln0", 4, &mut rng),
            LayerNormParams::new(&mut store, "ln1", 4, &mut rng),
        ];
        let ws = vec![Parameter::scalar("w0", 0.5, false), Parameter::scalar("w1", 0.5, false)];
        let mut data_rng = ChaCha8Rng::seed_from_u64(17);
        let d0: Vec<f64> = (0..4).map(|_| data_rng.gen_range(-1.0..1.0)).collect();
        let d1: Vec<f64> = (0..4).map(|_| data_rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let y0 = g.constant(d0.clone(), &[1, 1, 4]).unwrap();
        let y1 = g.constant(d1.clone(), &[1, 1, 4]).unwrap();
        let out = dlcl_combine_pre(&mut g, &[y0, y1], &ws, &lns).unwrap();

        // oracle: 0.5*LN0(y0) + 0.5*LN1(y1) via separate calls
        let mut g2 = Graph::new();
        let y0 = g2.constant(d0, &[1, 1, 4]).unwrap();
        let y1 = g2.constant(d1, &[1, 1, 4]).unwrap();
        let n0 = lns[0].apply(&mut g2, &y0).unwrap();
        let n1 = lns[1].apply(&mut g2, &y1).unwrap();
        let h0 = g2.scalar_mul(&n0, 0.5).unwrap();
        let h1 = g2.scalar_mul(&n1, 0.5).unwrap();
        let want = g2.add(&h0, &h1).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn combine_post_single_input_unit_weight_is_layer_norm() {
        let (mut store, mut rng) = setup();
        let ln = LayerNormParams::new(&mut store, "ln", 4, &mut rng);
        let w = Parameter::scalar("w", 1.0, false);
        let mut g = Graph::new();
        let y0 = g.constant(vec![0.4, -1.0, 2.0, 0.2], &[1, 1, 4]).unwrap();
        let out = dlcl_combine_post(&mut g, &[y0.clone()], &[w], &ln).unwrap();
        let want = ln.apply(&mut g, &y0).unwrap();
        assert_eq!(out.data(), want.data());
    }

    #[test]
    fn combine_post_cancellation_returns_bias() {
        let (mut store, mut rng) = setup();
        let ln = LayerNormParams::new(&mut store, "ln", 3, &mut rng);
        ln.bias.set_value(vec![0.7, -0.2, 0.1]);
        let ws = vec![Parameter::scalar("w0", 1.0, false), Parameter::scalar("w1", -1.0, false)];
        let mut g = Graph::new();
        let y = g.constant(vec![0.3, 0.6, -0.9], &[1, 1, 3]).unwrap();
        let out = dlcl_combine_post(&mut g, &[y.clone(), y], &ws, &ln).unwrap();
        // LN(0) = bias since the normalized zero row stays zero
        assert_eq!(out.data(), &[0.7, -0.2, 0.1]);
    }

    #[test]
    fn combine_post_matches_hand_composed_sum_then_ln() {
        let (mut store, mut rng) = setup();
        let ln = LayerNormParams::new(&mut store, "ln", 4, &mut rng);
        let ws: Vec<Parameter> = [0.3, -0.8, 1.4]
            .iter()
            .enumerate()
            .map(|(i, &v)| Parameter::scalar(format!("w{i}"), v, false))
            .collect();
        let mut data_rng = ChaCha8Rng::seed_from_u64(23);
        let data: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..8).map(|_| data_rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut g = Graph::new();
        let ys: Vec<Tensor> = data
            .iter()
            .map(|d| g.constant(d.clone(), &[1, 2, 4]).unwrap())
            .collect();
        let out = dlcl_combine_post(&mut g, &ys, &ws, &ln).unwrap();

        let mut g2 = Graph::new();
        let ys2: Vec<Tensor> = data
            .iter()
            .map(|d| g2.constant(d.clone(), &[1, 2, 4]).unwrap())
            .collect();
        let t0 = g2.scalar_mul(&ys2[0], 0.3).unwrap();
        let t1 = g2.scalar_mul(&ys2[1], -0.8).unwrap();
        let t2 = g2.scalar_mul(&ys2[2], 1.4).unwrap();
        let s = g2.add(&t0, &t1).unwrap();
        let s = g2.add(&s, &t2).unwrap();
        let want = ln.apply(&mut g2, &s).unwrap();

        assert_eq!(out.data(), want.data());
    }

    #[test]
    fn combine_rejects_wrong_row_length() {
        let (mut store, mut rng) = setup();
        let ln = LayerNormParams::new(&mut store, "ln", 2, &mut rng);
        let ws = vec![Parameter::scalar("w0", 1.0, false)];
        let mut g = Graph::new();
        let y0 = g.constant(vec![1.0, 2.0], &[1, 1, 2]).unwrap();
        let y1 = g.constant(vec![1.0, 2.0], &[1, 1, 2]).unwrap();
        assert!(dlcl_combine_post(&mut g, &[y0, y1], &ws, &ln).is_err());
    }

    #[test]
    fn gradients_reach_every_learned_scalar() {
        let (mut store, mut rng) = setup();
        let layers = 4;
        let agg = LayerAggregator::new(
            &mut store,
            "agg",
            AggregationMode::DlclLearned,
            NormPlacement::PreNorm,
            layers,
            4,
            &mut rng,
        );
        let mut g = Graph::new();
        let mut data_rng = ChaCha8Rng::seed_from_u64(3);
        let ys: Vec<Tensor> = (0..layers)
            .map(|_| {
                let d: Vec<f64> = (0..8).map(|_| data_rng.gen_range(-1.0..1.0)).collect();
                g.constant(d, &[1, 2, 4]).unwrap()
            })
            .collect();
        let mut acc: Option<Tensor> = None;
        for l in 0..layers {
            let x = agg.combine(&mut g, NormPlacement::PreNorm, &ys, l).unwrap();
            let sq = g.mul(&x, &x).unwrap();
            let s = g.sum(&sq).unwrap();
            acc = Some(match acc {
                None => s,
                Some(p) => g.add(&p, &s).unwrap(),
            });
        }
        g.backward(&acc.unwrap()).unwrap();
        let weights = agg.weights.as_ref().unwrap();
        let mut nonzero = 0;
        let mut total = 0;
        for row in weights.rows() {
            for p in row {
                assert!(p.has_grad(), "{} missing grad", p.name());
                total += 1;
                if p.grad()[0] != 0.0 {
                    nonzero += 1;
                }
            }
        }
        assert_eq!(total, layers * (layers + 1) / 2);
        assert!(nonzero * 100 >= total * 95, "{nonzero}/{total} nonzero");
    }
}
