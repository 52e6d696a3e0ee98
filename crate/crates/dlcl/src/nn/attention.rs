//! Multi-head scaled dot-product attention.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{dropout, ForwardCtx, Linear};
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "heads ({heads}) must divide d_model ({d_model})"
            )));
        }
        Ok(AttentionConfig { d_model, heads })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Additive attention mask of shape `[b*heads, t_q, t_k]`: 0 where attention
/// is allowed, -inf where forbidden. `causal` forbids position i from seeing
/// j > i; `key_pad` (per `[b, t_k]`, row-major) forbids padded keys.
pub fn build_attn_mask(
    b: usize,
    heads: usize,
    t_q: usize,
    t_k: usize,
    causal: bool,
    key_pad: Option<&[bool]>,
) -> Option<Vec<f64>> {
    if !causal && key_pad.is_none() {
        return None;
    }
    if let Some(pad) = key_pad {
        assert_eq!(pad.len(), b * t_k, "key_pad must be [b, t_k]");
    }
    let mut mask = vec![0.0; b * heads * t_q * t_k];
    for bi in 0..b {
        for hi in 0..heads {
            let base = (bi * heads + hi) * t_q * t_k;
            for qi in 0..t_q {
                for ki in 0..t_k {
                    let causal_block = causal && ki > qi;
                    let pad_block = key_pad.map(|p| p[bi * t_k + ki]).unwrap_or(false);
                    if causal_block || pad_block {
                        mask[base + qi * t_k + ki] = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }
    Some(mask)
}

/// Projections of one attention site. Output of `forward` is
/// `W_o . concat_heads(softmax(Q K^T / sqrt(d_k) + mask) V)`.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.d_model;
        MultiHeadAttention {
            cfg,
            wq: Linear::new(store, &format!("{prefix}.wq"), d, d, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), d, d, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
        attn_dropout: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        Ok(self.forward_with_weights(g, q, k, v, mask, attn_dropout, ctx)?.0)
    }

    /// Also returns the post-softmax attention weights `[b*h, t_q, t_k]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
        attn_dropout: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, Tensor)> {
        let h = self.cfg.heads;
        let qp = self.wq.forward(g, q)?;
        let kp = self.wk.forward(g, k)?;
        let vp = self.wv.forward(g, v)?;
        let qh = g.split_heads(&qp, h)?;
        let kh = g.split_heads(&kp, h)?;
        let vh = g.split_heads(&vp, h)?;
        let kt = g.transpose(&kh)?;
        let scores = g.matmul(&qh, &kt)?;
        let scores = g.scalar_mul(&scores, 1.0 / (self.cfg.d_k() as f64).sqrt())?;
        let scores = match mask {
            Some(m) => {
                if m.shape() != scores.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "attention_mask",
                        lhs: scores.shape().to_vec(),
                        rhs: m.shape().to_vec(),
                    });
                }
                g.add(&scores, m)?
            }
            None => scores,
        };
        let weights = g.softmax(&scores)?;
        let dropped = dropout(g, &weights, attn_dropout, ctx)?;
        let ctxv = g.matmul(&dropped, &vh)?;
        let merged = g.merge_heads(&ctxv, h)?;
        let out = self.wo.forward(g, &merged)?;
        Ok((out, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn identity_mha(d: usize) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(
            &mut store,
            "attn",
            AttentionConfig::new(d, 1).unwrap(),
            &mut rng,
        );
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        for lin in [&mha.wq, &mha.wk, &mha.wv, &mha.wo] {
            lin.w.set_value(eye.clone());
            lin.b.set_value(vec![0.0; d]);
        }
        (store, mha)
    }

    #[test]
    fn uniform_attention_averages_values() {
        let (_s, mha) = identity_mha(2);
        let mut g = Graph::new();
        let q = g.constant(vec![0.3, -0.4, 1.0, 0.2, 0.0, 0.0], &[1, 3, 2]).unwrap();
        let k = g.constant(vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5], &[1, 3, 2]).unwrap();
        let v = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]).unwrap();
        let y = mha
            .forward(&mut g, &q, &k, &v, None, 0.0, &mut ForwardCtx::eval())
            .unwrap();
        // all keys equal -> uniform weights -> every output row is the mean value row
        for row in 0..3 {
            assert!((y.data()[row * 2] - 3.0).abs() < 1e-12);
            assert!((y.data()[row * 2 + 1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_is_strictly_lower_triangular_plus_diagonal() {
        let (_s, mha) = identity_mha(2);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = g.constant(data, &[1, 3, 2]).unwrap();
        let mask = build_attn_mask(1, 1, 3, 3, true, None).unwrap();
        let mask = g.constant(mask, &[1, 3, 3]).unwrap();
        let (_, w) = mha
            .forward_with_weights(&mut g, &x, &x, &x, Some(&mask), 0.0, &mut ForwardCtx::eval())
            .unwrap();
        for qi in 0..3 {
            let mut row_sum = 0.0;
            for ki in 0..3 {
                let wv = w.data()[qi * 3 + ki];
                row_sum += wv;
                if ki > qi {
                    assert_eq!(wv, 0.0, "future weight must be exactly zero");
                } else {
                    assert!(wv > 0.0);
                }
            }
            assert!((row_sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn two_head_case_matches_brute_force_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let mha = MultiHeadAttention::new(&mut store, "attn", cfg, &mut rng);
        let (t, d, dk, h) = (3usize, 4usize, 2usize, 2usize);
        let x: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let xv = g.constant(x.clone(), &[1, t, d]).unwrap();
        let y = mha
            .forward(&mut g, &xv, &xv, &xv, None, 0.0, &mut ForwardCtx::eval())
            .unwrap();

        // brute-force re-computation with plain loops
        let affine = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; t * d];
            for i in 0..t {
                for j in 0..d {
                    let mut s = b[j];
                    for kk in 0..d {
                        s += x[i * d + kk] * w[kk * d + j];
                    }
                    out[i * d + j] = s;
                }
            }
            out
        };
        let qp = affine(&mha.wq.w.value(), &mha.wq.b.value(), &x);
        let kp = affine(&mha.wk.w.value(), &mha.wk.b.value(), &x);
        let vp = affine(&mha.wv.w.value(), &mha.wv.b.value(), &x);
        let mut merged = vec![0.0; t * d];
        for hi in 0..h {
            for qi in 0..t {
                let mut scores = vec![0.0; t];
                for ki in 0..t {
                    let mut s = 0.0;
                    for c in 0..dk {
                        s += qp[qi * d + hi * dk + c] * kp[ki * d + hi * dk + c];
                    }
                    scores[ki] = s / (dk as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dk {
                    let mut acc = 0.0;
                    for ki in 0..t {
                        acc += exps[ki] / z * vp[ki * d + hi * dk + c];
                    }
                    merged[qi * d + hi * dk + c] = acc;
                }
            }
        }
        let want = affine(&mha.wo.w.value(), &mha.wo.b.value(), &merged);
        for (got, want) in y.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn mask_shape_mismatch_is_rejected() {
        let (_s, mha) = identity_mha(2);
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 6], &[1, 3, 2]).unwrap();
        let bad = g.constant(vec![0.0; 4], &[1, 2, 2]).unwrap();
        let err = mha
            .forward(&mut g, &x, &x, &x, Some(&bad), 0.0, &mut ForwardCtx::eval())
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }
}
