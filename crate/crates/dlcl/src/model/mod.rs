//! Residual stacks: post-norm/pre-norm units, encoder and decoder towers,
//! and dense layer aggregation between complete layers.

mod decoder;
mod dlcl;
mod encoder;
mod residual;
mod transformer;

pub use decoder::{Decoder, DecoderLayer};
pub use dlcl::{dlcl_combine_post, dlcl_combine_pre, make_weight_preset, DlclWeights, LayerAggregator};
pub use encoder::{Encoder, EncoderLayer, EncoderTrace};
pub use residual::residual_unit;
pub use transformer::{Batch, LossOutput, TransformerModel, BOS, EOS, FIRST_PAYLOAD, PAD};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Where layer normalization sits in a residual unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `x_{l+1} = LN(x_l + F(x_l))`
    PostNorm,
    /// `x_{l+1} = x_l + F(LN(x_l))`, one extra LN on top of the stack
    PreNorm,
}

impl NormPlacement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "postnorm" | "post-norm" | "post" => Ok(NormPlacement::PostNorm),
            "prenorm" | "pre-norm" | "pre" => Ok(NormPlacement::PreNorm),
            other => Err(Error::Config(format!("unknown norm placement '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NormPlacement::PostNorm => "postnorm",
            NormPlacement::PreNorm => "prenorm",
        }
    }
}

/// How the input of each complete layer is formed from earlier outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Plain residual stacking: layer l+1 reads y_l directly.
    Standard,
    /// Learnable scalar per (consumer, producer) edge, initialized to 1/(row len).
    DlclLearned,
    /// All weights frozen at 1.
    DlclAllOne,
    /// Row of length n frozen at 1/n.
    DlclAverage,
    /// Average weights with the aggregation layer norm bypassed.
    DlclAverageNoLn,
    /// Frozen rows (0,...,0,1) with the aggregation LN bypassed; numerically
    /// identical to `Standard` while exercising the aggregation path.
    ResidualPassthrough,
}

impl AggregationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AggregationMode::Standard),
            "dlcl" | "dlcl-learned" => Ok(AggregationMode::DlclLearned),
            "dlcl-all-one" => Ok(AggregationMode::DlclAllOne),
            "dlcl-average" => Ok(AggregationMode::DlclAverage),
            "dlcl-average-no-ln" => Ok(AggregationMode::DlclAverageNoLn),
            "residual-passthrough" => Ok(AggregationMode::ResidualPassthrough),
            other => Err(Error::Config(format!("unknown aggregation mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AggregationMode::Standard => "standard",
            AggregationMode::DlclLearned => "dlcl-learned",
            AggregationMode::DlclAllOne => "dlcl-all-one",
            AggregationMode::DlclAverage => "dlcl-average",
            AggregationMode::DlclAverageNoLn => "dlcl-average-no-ln",
            AggregationMode::ResidualPassthrough => "residual-passthrough",
        }
    }

    /// Whether this mode applies layer normalization inside the aggregator.
    pub fn uses_ln(&self) -> bool {
        matches!(
            self,
            AggregationMode::DlclLearned | AggregationMode::DlclAllOne | AggregationMode::DlclAverage
        )
    }

    pub fn is_aggregating(&self) -> bool {
        !matches!(self, AggregationMode::Standard)
    }
}

/// Everything that determines the architecture. Two models with equal configs
/// have interchangeable checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub norm: NormPlacement,
    pub aggregation: AggregationMode,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub residual_dropout: f64,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_depth: 6,
            decoder_depth: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            norm: NormPlacement::PreNorm,
            aggregation: AggregationMode::Standard,
            src_vocab: 16,
            tgt_vocab: 16,
            residual_dropout: 0.1,
            attn_dropout: 0.1,
            ffn_dropout: 0.1,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return Err(Error::Config("encoder and decoder depth must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(Error::Config("vocabularies need pad/bos/eos plus payload ids".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must be in [0,1)".into()));
        }
        for (name, rate) in [
            ("residual_dropout", self.residual_dropout),
            ("attn_dropout", self.attn_dropout),
            ("ffn_dropout", self.ffn_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} must be in [0,1)")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form with dropout rates zeroed, so
    /// checkpoints stay loadable across dropout settings that do not change
    /// the parameter layout.
    pub fn hash(&self) -> [u8; 32] {
        let canon = ModelConfig {
            residual_dropout: 0.0,
            attn_dropout: 0.0,
            ffn_dropout: 0.0,
            ..self.clone()
        };
        let json = serde_json::to_string(&canon).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }
}
