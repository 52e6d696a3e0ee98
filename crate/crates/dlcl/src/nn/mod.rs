//! Transformer primitive layers: layer normalization, linear maps,
//! embeddings with sinusoidal positions, multi-head attention, feed-forward
//! blocks and the label-smoothed training loss.

mod attention;
mod embedding;
mod linear;
mod loss;
mod norm;

pub use attention::{build_attn_mask, AttentionConfig, MultiHeadAttention};
pub use embedding::{sinusoidal_positions, Embedding};
pub use linear::{FeedForward, Linear};
pub use loss::{label_smoothed_cross_entropy, SmoothingConfig};
pub use norm::LayerNormParams;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor};

/// Per-forward execution mode: training enables dropout, evaluation is
/// deterministic and never draws from the RNG.
pub struct ForwardCtx {
    pub training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Inverted dropout: keeps values with probability `1 - rate` and rescales by
/// `1/(1 - rate)` so expectations match eval mode. Identity outside training.
pub fn dropout(g: &mut Graph, x: &Tensor, rate: f64, ctx: &mut ForwardCtx) -> Result<Tensor> {
    if !ctx.training || rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if ctx.rng.gen_range(0.0..1.0) < keep { scale } else { 0.0 })
        .collect();
    let mask = g.constant(mask, x.shape())?;
    g.mul(x, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let mut ctx = ForwardCtx::eval();
        let y = dropout(&mut g, &x, 0.5, &mut ctx).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_zeroes_or_rescales_in_train_mode() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0; 1000], &[1000]).unwrap();
        let mut ctx = ForwardCtx::train(42);
        let y = dropout(&mut g, &x, 0.2, &mut ctx).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        assert!((700..900).contains(&kept), "kept {kept} of 1000 at rate 0.2");
    }

    #[test]
    fn dropout_is_deterministic_given_seed() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(vec![1.0; 64], &[64]).unwrap();
            let mut ctx = ForwardCtx::train(7);
            dropout(&mut g, &x, 0.3, &mut ctx).unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
