//! Encoder tower: embeddings, complete layers (self-attention + feed-forward
//! residual units) and aggregation nodes between them.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{residual_unit, LayerAggregator, ModelConfig, NormPlacement};
use crate::nn::{
    build_attn_mask, dropout, AttentionConfig, Embedding, FeedForward, ForwardCtx, LayerNormParams,
    MultiHeadAttention,
};
use crate::tensor::{Graph, ParamStore, Tensor};

/// One complete encoder layer: a self-attention unit then a feed-forward unit.
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub attn_ln: LayerNormParams,
    pub ffn: FeedForward,
    pub ffn_ln: LayerNormParams,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let attn_cfg = AttentionConfig::new(cfg.d_model, cfg.heads)?;
        Ok(EncoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), attn_cfg, rng),
            attn_ln: LayerNormParams::new(store, &format!("{prefix}.attn_ln"), cfg.d_model, rng),
            ffn: FeedForward::new(
                store,
                &format!("{prefix}.ffn"),
                cfg.d_model,
                cfg.d_ff,
                cfg.ffn_dropout,
                rng,
            ),
            ffn_ln: LayerNormParams::new(store, &format!("{prefix}.ffn_ln"), cfg.d_model, rng),
        })
    }
}

/// Activations recorded during one encoder pass: `y[0..=L]` are the complete
/// layer outputs with `y[0]` the embedding, `x[0..L]` the layer inputs where
/// `x[l]` feeds layer l+1.
pub struct EncoderTrace {
    pub y: Vec<Tensor>,
    pub x: Vec<Tensor>,
}

pub struct Encoder {
    pub embed: Embedding,
    pub layers: Vec<EncoderLayer>,
    pub top_ln: Option<LayerNormParams>,
    pub agg: LayerAggregator,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let embed = Embedding::new(store, "encoder.embed", cfg.src_vocab, cfg.d_model, rng);
        let mut layers = Vec::with_capacity(cfg.encoder_depth);
        for l in 0..cfg.encoder_depth {
            layers.push(EncoderLayer::new(store, &format!("encoder.layer{l}"), cfg, rng)?);
        }
        let top_ln = match cfg.norm {
            NormPlacement::PreNorm => Some(LayerNormParams::new(store, "encoder.top_ln", cfg.d_model, rng)),
            NormPlacement::PostNorm => None,
        };
        // Aggregation parameters draw nothing from the RNG, so shared layers
        // initialize identically across aggregation modes.
        let agg = LayerAggregator::new(
            store,
            "encoder.agg",
            cfg.aggregation,
            cfg.norm,
            cfg.encoder_depth,
            cfg.d_model,
            rng,
        );
        Ok(Encoder {
            embed,
            layers,
            top_ln,
            agg,
        })
    }

    /// Runs the tower over `[b, t]` tokens. `src_pad`, when given, marks
    /// padded key positions per `[b, t]`. Returns the encoder output and the
    /// full activation trace.
    pub fn forward(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        tokens: &[usize],
        b: usize,
        t: usize,
        src_pad: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, EncoderTrace)> {
        let emb = self.embed.forward(g, tokens, b, t)?;
        let y0 = dropout(g, &emb, cfg.residual_dropout, ctx)?;
        let mask = match build_attn_mask(b, cfg.heads, t, t, false, src_pad) {
            Some(m) => Some(g.constant(m, &[b * cfg.heads, t, t])?),
            None => None,
        };

        let mut ys = vec![y0];
        let mut xs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = self.agg.combine(g, cfg.norm, &ys, l)?;
            xs.push(x.clone());
            let h = residual_unit(
                g,
                &x,
                cfg.norm,
                &layer.attn_ln,
                cfg.residual_dropout,
                ctx,
                |g, inp, ctx| {
                    layer
                        .self_attn
                        .forward(g, inp, inp, inp, mask.as_ref(), cfg.attn_dropout, ctx)
                },
            )?;
            let y = residual_unit(
                g,
                &h,
                cfg.norm,
                &layer.ffn_ln,
                cfg.residual_dropout,
                ctx,
                |g, inp, ctx| layer.ffn.forward(g, inp, ctx),
            )?;
            ys.push(y);
        }

        let out = match &self.top_ln {
            Some(ln) => ln.apply(g, ys.last().expect("y0 exists"))?,
            None => ys.last().expect("y0 exists").clone(),
        };
        Ok((out, EncoderTrace { y: ys, x: xs }))
    }
}
