//! Label-smoothed cross entropy over flattened logits.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Smoothing rate, vocabulary size and the pad id excluded from the loss.
/// The target distribution per token is `(1 - eps) * onehot + eps / vocab`.
#[derive(Clone, Copy, Debug)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    pub vocab_size: usize,
    pub pad_id: usize,
}

impl SmoothingConfig {
    pub fn new(epsilon: f64, vocab_size: usize, pad_id: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!("label smoothing {epsilon} not in [0,1)")));
        }
        if pad_id >= vocab_size {
            return Err(Error::Config(format!(
                "pad id {pad_id} not below vocab size {vocab_size}"
            )));
        }
        Ok(SmoothingConfig { epsilon, vocab_size, pad_id })
    }
}

/// Mean `-sum_i q_i log p_i` over non-pad tokens. Returns the scalar loss and
/// the number of tokens that entered it.
pub fn label_smoothed_cross_entropy(
    g: &mut Graph,
    logits: &Tensor,
    targets: &[usize],
    cfg: &SmoothingConfig,
) -> Result<(Tensor, usize)> {
    if logits.shape().last() != Some(&cfg.vocab_size) {
        return Err(Error::InvalidShape {
            op: "label_smoothed_ce",
            shape: logits.shape().to_vec(),
            reason: format!("last axis must be the vocab size {}", cfg.vocab_size),
        });
    }
    g.label_smoothed_ce(logits, targets, cfg.pad_id, cfg.epsilon)
}
