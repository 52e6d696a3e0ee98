//! Token embeddings scaled by sqrt(d_model) plus sinusoidal positions.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Init, ParamStore, Parameter, Tensor};

/// The classic fixed position table: `pe[pos, 2i] = sin(pos * f_i)`,
/// `pe[pos, 2i+1] = cos(pos * f_i)` with `f_i = 10000^(-2i/d)`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d.div_ceil(2) {
            let freq = (-((2 * i) as f64) / d as f64 * 10000f64.ln()).exp();
            let angle = pos as f64 * freq;
            pe[pos * d + 2 * i] = angle.sin();
            if 2 * i + 1 < d {
                pe[pos * d + 2 * i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Lookup table of shape `[vocab, d]`, init normal(0, d^-1/2).
#[derive(Clone)]
pub struct Embedding {
    pub table: Parameter,
    pub d_model: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        let table = store.alloc(
            format!("{prefix}.table"),
            &[vocab, d_model],
            Init::Normal { std },
            true,
            rng,
        );
        Embedding { table, d_model }
    }

    /// Row lookups scaled by sqrt(d_model), without positions: `[b, t, d]`.
    pub fn lookup_scaled(&self, g: &mut Graph, tokens: &[usize], b: usize, t: usize) -> Result<Tensor> {
        debug_assert_eq!(tokens.len(), b * t);
        let table = g.bind(&self.table);
        let rows = g.gather_rows(&table, tokens)?;
        let scaled = g.scalar_mul(&rows, (self.d_model as f64).sqrt())?;
        g.reshape(&scaled, &[b, t, self.d_model])
    }

    /// Scaled lookup plus the sinusoidal position encoding.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], b: usize, t: usize) -> Result<Tensor> {
        let emb = self.lookup_scaled(g, tokens, b, t)?;
        let pe_one = sinusoidal_positions(t, self.d_model);
        let mut pe = Vec::with_capacity(b * t * self.d_model);
        for _ in 0..b {
            pe.extend_from_slice(&pe_one);
        }
        let pe = g.constant(pe, &[b, t, self.d_model])?;
        g.add(&emb, &pe)
    }
}
