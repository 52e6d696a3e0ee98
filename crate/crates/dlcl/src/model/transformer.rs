//! The full encoder-decoder model over token-id sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Decoder, Encoder, EncoderTrace, ModelConfig};
use crate::nn::{label_smoothed_cross_entropy, ForwardCtx, SmoothingConfig};
use crate::tensor::{Graph, ParamStore, Tensor};

/// Reserved token ids shared by every task and model.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id usable as task payload.
pub const FIRST_PAYLOAD: usize = 3;

/// One teacher-forcing batch: row-major `[b, t]` id matrices. Pad positions
/// hold [`PAD`].
#[derive(Clone, Debug)]
pub struct Batch {
    pub b: usize,
    pub t_src: usize,
    pub t_tgt: usize,
    pub src: Vec<usize>,
    pub src_pad: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
}

impl Batch {
    /// Number of non-pad target tokens (the loss denominator).
    pub fn token_count(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// Loss and teacher-forced accuracy of one forward pass.
pub struct LossOutput {
    pub loss: Tensor,
    pub logits: Tensor,
    pub token_count: usize,
    pub correct: usize,
}

impl LossOutput {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.token_count as f64
    }
}

pub struct TransformerModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub smoothing: SmoothingConfig,
}

impl TransformerModel {
    /// Builds and initializes a model. Identical `(cfg, seed)` pairs produce
    /// bit-identical parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut store, &cfg, &mut rng)?;
        let decoder = Decoder::new(&mut store, &cfg, &mut rng)?;
        let smoothing = SmoothingConfig::new(cfg.label_smoothing, cfg.tgt_vocab, PAD)?;
        Ok(TransformerModel {
            cfg,
            store,
            encoder,
            decoder,
            smoothing,
        })
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        b: usize,
        t: usize,
        src_pad: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, EncoderTrace)> {
        self.encoder.forward(g, &self.cfg, tokens, b, t, src_pad, ctx)
    }

    /// Teacher-forced logits `[b, t_tgt, tgt_vocab]` for a batch.
    pub fn forward_logits(
        &self,
        g: &mut Graph,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, EncoderTrace)> {
        let (enc_out, trace) = self.encode(g, &batch.src, batch.b, batch.t_src, Some(&batch.src_pad), ctx)?;
        let tgt_pad: Vec<bool> = batch.tgt_in.iter().map(|&t| t == PAD).collect();
        let logits = self.decoder.forward(
            g,
            &self.cfg,
            &batch.tgt_in,
            batch.b,
            batch.t_tgt,
            Some(&tgt_pad),
            &enc_out,
            Some(&batch.src_pad),
            ctx,
        )?;
        Ok((logits, trace))
    }

    /// Label-smoothed loss plus accuracy stats for one batch.
    pub fn forward_loss(&self, g: &mut Graph, batch: &Batch, ctx: &mut ForwardCtx) -> Result<LossOutput> {
        let (logits, _) = self.forward_logits(g, batch, ctx)?;
        self.loss_from_logits(g, batch, logits)
    }

    /// Loss plus the encoder activation trace, for gradient probes.
    pub fn forward_loss_with_trace(
        &self,
        g: &mut Graph,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<(LossOutput, EncoderTrace)> {
        let (logits, trace) = self.forward_logits(g, batch, ctx)?;
        Ok((self.loss_from_logits(g, batch, logits)?, trace))
    }

    fn loss_from_logits(&self, g: &mut Graph, batch: &Batch, logits: Tensor) -> Result<LossOutput> {
        let v = self.cfg.tgt_vocab;
        let flat = g.reshape(&logits, &[batch.b * batch.t_tgt, v])?;
        let (loss, token_count) = label_smoothed_cross_entropy(g, &flat, &batch.tgt_out, &self.smoothing)?;
        let mut correct = 0;
        for (row, &want) in flat.data().chunks_exact(v).zip(&batch.tgt_out) {
            if want == PAD {
                continue;
            }
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty row");
            if argmax == want {
                correct += 1;
            }
        }
        Ok(LossOutput {
            loss,
            logits,
            token_count,
            correct,
        })
    }

    /// Pre-encodes a single source sequence and returns a step scorer for
    /// decoding: given a bos-led prefix it yields next-token log-probs.
    pub fn scorer<'a>(&'a self, src: &'a [usize]) -> Result<impl Fn(&[usize]) -> Result<Vec<f64>> + 'a> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let (enc_out, _) = self.encode(&mut g, src, 1, src.len(), None, &mut ctx)?;
        let enc_data = enc_out.data().to_vec();
        let enc_shape = enc_out.shape().to_vec();
        let v = self.cfg.tgt_vocab;
        Ok(move |prefix: &[usize]| -> Result<Vec<f64>> {
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::eval();
            let enc = g.constant(enc_data.clone(), &enc_shape)?;
            let t = prefix.len();
            let logits = self.decoder.forward(
                &mut g,
                &self.cfg,
                prefix,
                1,
                t,
                None,
                &enc,
                None,
                &mut ctx,
            )?;
            let flat = g.reshape(&logits, &[t, v])?;
            let logp = g.log_softmax(&flat)?;
            Ok(logp.data()[(t - 1) * v..t * v].to_vec())
        })
    }
}
