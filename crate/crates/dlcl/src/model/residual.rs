//! The residual unit wrapping one sub-layer.

use crate::error::Result;
use crate::model::NormPlacement;
use crate::nn::{dropout, ForwardCtx, LayerNormParams};
use crate::tensor::{Graph, Tensor};

/// Wraps a sub-layer `f` with an identity connection:
/// post-norm `LN(x + f(x))`, pre-norm `x + f(LN(x))`. The branch output is
/// dropped out at `residual_dropout` before the addition.
pub fn residual_unit<F>(
    g: &mut Graph,
    x: &Tensor,
    norm: NormPlacement,
    ln: &LayerNormParams,
    residual_dropout: f64,
    ctx: &mut ForwardCtx,
    mut f: F,
) -> Result<Tensor>
where
    F: FnMut(&mut Graph, &Tensor, &mut ForwardCtx) -> Result<Tensor>,
{
    match norm {
        NormPlacement::PostNorm => {
            let branch = f(g, x, ctx)?;
            let branch = dropout(g, &branch, residual_dropout, ctx)?;
            let y = g.add(x, &branch)?;
            ln.apply(g, &y)
        }
        NormPlacement::PreNorm => {
            let normed = ln.apply(g, x)?;
            let branch = f(g, &normed, ctx)?;
            let branch = dropout(g, &branch, residual_dropout, ctx)?;
            g.add(x, &branch)
        }
    }
}
