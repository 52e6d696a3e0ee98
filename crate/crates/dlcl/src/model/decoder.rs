//! Decoder tower: causal self-attention, encoder-decoder attention and
//! feed-forward units, with decoder-side aggregation across complete layers.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{residual_unit, LayerAggregator, ModelConfig, NormPlacement};
use crate::nn::{
    build_attn_mask, dropout, AttentionConfig, Embedding, FeedForward, ForwardCtx, LayerNormParams,
    Linear, MultiHeadAttention,
};
use crate::tensor::{Graph, ParamStore, Tensor};

pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_ln: LayerNormParams,
    pub cross_attn: MultiHeadAttention,
    pub cross_ln: LayerNormParams,
    pub ffn: FeedForward,
    pub ffn_ln: LayerNormParams,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let attn_cfg = AttentionConfig::new(cfg.d_model, cfg.heads)?;
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{prefix}.self"), attn_cfg, rng),
            self_ln: LayerNormParams::new(store, &format!("{prefix}.self_ln"), cfg.d_model, rng),
            cross_attn: MultiHeadAttention::new(store, &format!("{prefix}.cross"), attn_cfg, rng),
            cross_ln: LayerNormParams::new(store, &format!("{prefix}.cross_ln"), cfg.d_model, rng),
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

pub struct Decoder {
    pub embed: Embedding,
    pub layers: Vec<DecoderLayer>,
    pub top_ln: Option<LayerNormParams>,
    pub agg: LayerAggregator,
    pub out_proj: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let embed = Embedding::new(store, "decoder.embed", cfg.tgt_vocab, cfg.d_model, rng);
        let mut layers = Vec::with_capacity(cfg.decoder_depth);
        for l in 0..cfg.decoder_depth {
            layers.push(DecoderLayer::new(store, &format!("decoder.layer{l}"), cfg, rng)?);
        }
        let top_ln = match cfg.norm {
            NormPlacement::PreNorm => Some(LayerNormParams::new(store, "decoder.top_ln", cfg.d_model, rng)),
            NormPlacement::PostNorm => None,
        };
        let agg = LayerAggregator::new(
            store,
            "decoder.agg",
            cfg.aggregation,
            cfg.norm,
            cfg.decoder_depth,
            cfg.d_model,
            rng,
        );
        let out_proj = Linear::new(store, "decoder.out_proj", cfg.d_model, cfg.tgt_vocab, rng);
        Ok(Decoder {
            embed,
            layers,
            top_ln,
            agg,
            out_proj,
        })
    }

    /// Teacher-forced pass over `[b, t]` target-side tokens against a fixed
    /// encoder output `[b, t_src, d]`. Cross-attention always reads the final
    /// encoder output. Returns logits `[b, t, tgt_vocab]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        tokens: &[usize],
        b: usize,
        t: usize,
        tgt_pad: Option<&[bool]>,
        enc_out: &Tensor,
        src_pad: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let t_src = enc_out.shape()[1];
        let emb = self.embed.forward(g, tokens, b, t)?;
        let y0 = dropout(g, &emb, cfg.residual_dropout, ctx)?;
        let self_mask = build_attn_mask(b, cfg.heads, t, t, true, tgt_pad)
            .map(|m| g.constant(m, &[b * cfg.heads, t, t]))
            .transpose()?;
        let cross_mask = build_attn_mask(b, cfg.heads, t, t_src, false, src_pad)
            .map(|m| g.constant(m, &[b * cfg.heads, t, t_src]))
            .transpose()?;

        let mut ys = vec![y0];
        for (l, layer) in self.layers.iter().enumerate() {
            let x = self.agg.combine(g, cfg.norm, &ys, l)?;
            let h = residual_unit(
                g,
                &x,
                cfg.norm,
                &layer.self_ln,
                cfg.residual_dropout,
                ctx,
                |g, inp, ctx| {
                    layer
                        .self_attn
                        .forward(g, inp, inp, inp, self_mask.as_ref(), cfg.attn_dropout, ctx)
                },
            )?;
            let h = residual_unit(
                g,
                &h,
                cfg.norm,
                &layer.cross_ln,
                cfg.residual_dropout,
                ctx,
                |g, inp, ctx| {
                    layer
                        .cross_attn
                        .forward(g, inp, enc_out, enc_out, cross_mask.as_ref(), cfg.attn_dropout, ctx)
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
        self.out_proj.forward(g, &out)
    }
}
