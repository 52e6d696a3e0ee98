//! Numerical oracles: central finite differences and dense Jacobians.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Upper bound on `size(output) * size(input)` for dense Jacobians.
pub const JACOBIAN_GUARD: usize = 1_000_000;

const REL_FLOOR: f64 = 1e-8;

/// Compares the analytic gradient of a scalar-valued function against central
/// finite differences at `x`. Returns the maximum relative error over all
/// coordinates, with errors floored at `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let xv = g.variable_from(x);
    let y = f(&mut g, &xv)?;
    if !y.is_scalar() {
        return Err(Error::NotScalar {
            shape: y.shape().to_vec(),
        });
    }
    g.backward(&y)?;
    let analytic: Vec<f64> = match g.grad(&xv) {
        Some(buf) => buf.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.variable(data, x.shape())?;
        Ok(f(&mut g, &xv)?.item())
    };

    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite { coord: i });
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}

/// Finite-difference check against a model parameter: `f` must rebuild the
/// forward pass from the parameter's current value on every call. The
/// parameter is restored afterwards.
pub fn finite_difference_check_param<F>(
    f: F,
    param: &crate::tensor::Parameter,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Tensor>,
{
    param.zero_grad();
    let mut g = Graph::new();
    let y = f(&mut g)?;
    if !y.is_scalar() {
        return Err(Error::NotScalar {
            shape: y.shape().to_vec(),
        });
    }
    g.backward(&y)?;
    let analytic = param.grad();

    let base = param.value().clone();
    let eval = |data: Vec<f64>| -> Result<f64> {
        param.set_value(data);
        let mut g = Graph::new();
        Ok(f(&mut g)?.item())
    };
    let mut max_err: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let (yp, ym) = (eval(plus)?, eval(minus)?);
        let numeric = (yp - ym) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            param.set_value(base);
            return Err(Error::NonFinite { coord: i });
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    param.set_value(base);
    Ok(max_err)
}

/// Dense Jacobian of `output` with respect to `input`, both nodes of `g`.
/// Row i holds the gradient of output coordinate i. Refuses to materialize
/// anything larger than [`JACOBIAN_GUARD`] entries.
pub fn jacobian(g: &Graph, output: &Tensor, input: &Tensor) -> Result<Vec<Vec<f64>>> {
    let out_size = output.numel();
    let in_size = input.numel();
    if out_size.saturating_mul(in_size) > JACOBIAN_GUARD {
        return Err(Error::JacobianTooLarge {
            out_size,
            in_size,
            guard: JACOBIAN_GUARD,
        });
    }
    let mut rows = Vec::with_capacity(out_size);
    let mut seed = vec![0.0; out_size];
    for i in 0..out_size {
        seed[i] = 1.0;
        let grads = g.vjp(output, &seed)?;
        seed[i] = 0.0;
        let row = match g.node_grad(&grads, input)? {
            Some(buf) => buf.to_vec(),
            None => vec![0.0; in_size],
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Maximum entrywise relative difference between two matrices, floored at
/// 1e-8 in the denominator.
pub fn max_rel_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut max = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            let denom = x.abs().max(y.abs()).max(REL_FLOOR);
            max = max.max((x - y).abs() / denom);
        }
    }
    max
}
