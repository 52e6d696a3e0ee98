//! Affine maps and the position-wise feed-forward block.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{dropout, ForwardCtx};
use crate::tensor::{Graph, Init, ParamStore, Parameter, Tensor};

/// `y = x W + b` with `W: [d_in, d_out]`, Xavier-uniform init, zero bias.
/// Accepts `[n, d_in]` or `[b, t, d_in]` inputs.
#[derive(Clone)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.alloc(format!("{prefix}.w"), &[d_in, d_out], Init::XavierUniform, true, rng);
        let b = store.alloc(format!("{prefix}.b"), &[d_out], Init::Zeros, true, rng);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let w = g.bind(&self.w);
        let b = g.bind(&self.b);
        let h = g.matmul(x, &w)?;
        g.add_bias(&h, &b)
    }
}

/// Two affine maps around a ReLU, applied row-wise.
#[derive(Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
    pub inner_dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        inner_dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w1 = Linear::new(store, &format!("{prefix}.w1"), d_model, d_ff, rng);
        let w2 = Linear::new(store, &format!("{prefix}.w2"), d_ff, d_model, rng);
        FeedForward { w1, w2, inner_dropout }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let h = self.w1.forward(g, x)?;
        let h = g.relu(&h)?;
        let h = dropout(g, &h, self.inner_dropout, ctx)?;
        self.w2.forward(g, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_broadcast_second_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ffn = FeedForward::new(&mut store, "ffn", 3, 6, 0.0, &mut rng);
        ffn.w1.w.set_value(vec![0.0; 18]);
        ffn.w2.w.set_value(vec![0.0; 18]);
        ffn.w2.b.set_value(vec![0.5, -0.5, 1.5]);
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let y = ffn.forward(&mut g, &x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5, 1.5, 0.5, -0.5, 1.5]);
    }

    #[test]
    fn one_dimensional_relu_clamp() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ffn = FeedForward::new(&mut store, "ffn", 1, 1, 0.0, &mut rng);
        ffn.w1.w.set_value(vec![1.0]);
        ffn.w2.w.set_value(vec![1.0]);
        let mut g = Graph::new();
        let x = g.constant(vec![-2.0], &[1, 1]).unwrap();
        let y = ffn.forward(&mut g, &x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn matches_composed_kernel_calls_bit_for_bit() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ffn = FeedForward::new(&mut store, "ffn", 4, 8, 0.0, &mut rng);
        let x_data: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();

        let mut g = Graph::new();
        let x = g.constant(x_data.clone(), &[2, 4]).unwrap();
        let y = ffn.forward(&mut g, &x, &mut ForwardCtx::eval()).unwrap();

        // same computation composed by hand from kernel ops
        let mut g2 = Graph::new();
        let x2 = g2.constant(x_data, &[2, 4]).unwrap();
        let w1 = g2.constant(ffn.w1.w.value().clone(), &[4, 8]).unwrap();
        let b1 = g2.constant(ffn.w1.b.value().clone(), &[8]).unwrap();
        let w2 = g2.constant(ffn.w2.w.value().clone(), &[8, 4]).unwrap();
        let b2 = g2.constant(ffn.w2.b.value().clone(), &[4]).unwrap();
        let h = g2.matmul(&x2, &w1).unwrap();
        let h = g2.add_bias(&h, &b1).unwrap();
        let h = g2.relu(&h).unwrap();
        let h = g2.matmul(&h, &w2).unwrap();
        let want = g2.add_bias(&h, &b2).unwrap();

        assert_eq!(y.data(), want.data());
    }
}
