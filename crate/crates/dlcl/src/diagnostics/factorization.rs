//! Numeric verification of the backward-pass factorizations.
//!
//! For a stack of residual sub-layers the end-to-end Jacobian dx_L/dx_l
//! factors as
//!
//! - pre-norm:  `I + sum_{k=l}^{L-1} dF_pre(x_k)/dx_l`, a depth-independent
//!   number of product terms on the identity path, and
//! - post-norm: the per-layer interleaved product
//!   `prod_{k=l}^{L-1} J_LN(y_k) . (I + dF(x_k)/dx_k)` (top factor leftmost).
//!
//! Both are assembled here from per-unit Jacobians and compared entrywise
//! against the end-to-end Jacobian of the same recorded forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::NormPlacement;
use crate::nn::{AttentionConfig, FeedForward, ForwardCtx, LayerNormParams, MultiHeadAttention};
use crate::tensor::{jacobian, max_rel_error, Graph, ParamStore, Tensor};

/// Guard bounds for the dense-Jacobian stacks.
pub const MAX_DEPTH: usize = 4;
pub const MAX_D_MODEL: usize = 4;
pub const MAX_SEQ_LEN: usize = 2;

/// Shape of a tiny sub-layer stack used for factorization checks.
#[derive(Clone, Copy, Debug)]
pub struct TinyStackConfig {
    pub placement: NormPlacement,
    /// Number of residual sub-layers.
    pub depth: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl TinyStackConfig {
    pub fn new(placement: NormPlacement, depth: usize, d_model: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH || d_model == 0 || d_model > MAX_D_MODEL || seq_len == 0 || seq_len > MAX_SEQ_LEN
        {
            return Err(Error::GuardExceeded(format!(
                "tiny stack needs 1 <= depth <= {MAX_DEPTH}, 1 <= d_model <= {MAX_D_MODEL}, 1 <= seq_len <= {MAX_SEQ_LEN}; got depth {depth}, d_model {d_model}, seq_len {seq_len}"
            )));
        }
        Ok(TinyStackConfig {
            placement,
            depth,
            d_model,
            seq_len,
            seed,
        })
    }
}

enum Sublayer {
    Attn(MultiHeadAttention),
    Ffn(FeedForward),
}

struct Unit {
    f: Sublayer,
    ln: LayerNormParams,
}

/// A randomly initialized stack of residual sub-layers (alternating
/// self-attention and feed-forward) without any top normalization, so the
/// factorizations can be checked right below it.
pub struct SublayerStack {
    pub cfg: TinyStackConfig,
    #[allow(dead_code)]
    store: ParamStore,
    units: Vec<Unit>,
}

/// Forward records of one stack pass, all nodes of the same graph:
/// `x[k]` unit inputs (len depth+1), `branch[k] = F(..)` outputs before the
/// residual add, `y[k] = x_k + branch_k` (the post-norm LN inputs).
pub struct StackTrace {
    pub x: Vec<Tensor>,
    pub branch: Vec<Tensor>,
    pub y: Vec<Tensor>,
}

/// Result of one factorization check. Matrices are square of size
/// `seq_len * d_model` and belong to the full-span case (l = 0); the error is
/// the maximum over every tail sub-span l..L.
pub struct FactorizationCheck {
    pub placement: NormPlacement,
    pub depth: usize,
    pub assembled_jacobian: Vec<Vec<f64>>,
    pub end_to_end_jacobian: Vec<Vec<f64>>,
    pub max_rel_error: f64,
}

impl SublayerStack {
    pub fn new(cfg: TinyStackConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut units = Vec::with_capacity(cfg.depth);
        for k in 0..cfg.depth {
            let prefix = format!("stack.unit{k}");
            let f = if k % 2 == 0 {
                let attn_cfg = AttentionConfig::new(cfg.d_model, 1)?;
                Sublayer::Attn(MultiHeadAttention::new(&mut store, &format!("{prefix}.attn"), attn_cfg, &mut rng))
            } else {
                Sublayer::Ffn(FeedForward::new(
                    &mut store,
                    &format!("{prefix}.ffn"),
                    cfg.d_model,
                    2 * cfg.d_model,
                    0.0,
                    &mut rng,
                ))
            };
            let ln = LayerNormParams::new(&mut store, &format!("{prefix}.ln"), cfg.d_model, &mut rng);
            units.push(Unit { f, ln });
        }
        Ok(SublayerStack { cfg, store, units })
    }

    /// Zeroes every branch output projection, reducing each unit to its
    /// identity (pre-norm) or pure-LN (post-norm) path.
    pub fn zero_branches(&self) {
        let d = self.cfg.d_model;
        for unit in &self.units {
            match &unit.f {
                Sublayer::Attn(a) => {
                    a.wo.w.set_value(vec![0.0; d * d]);
                    a.wo.b.set_value(vec![0.0; d]);
                }
                Sublayer::Ffn(f) => {
                    f.w2.w.set_value(vec![0.0; 2 * d * d]);
                    f.w2.b.set_value(vec![0.0; d]);
                }
            }
        }
    }

    /// Runs the stack on a differentiable input leaf built from `x0` and
    /// records the trace.
    pub fn forward_trace(&self, g: &mut Graph, x0: &[f64]) -> Result<StackTrace> {
        let shape = [1, self.cfg.seq_len, self.cfg.d_model];
        let mut ctx = ForwardCtx::eval();
        let mut x = g.variable(x0.to_vec(), &shape)?;
        let mut xs = vec![x.clone()];
        let mut branches = Vec::with_capacity(self.cfg.depth);
        let mut ys = Vec::with_capacity(self.cfg.depth);
        for unit in &self.units {
            let (branch, next, y) = match self.cfg.placement {
                NormPlacement::PreNorm => {
                    let normed = unit.ln.apply(g, &x)?;
                    let b = self.apply_sublayer(g, &unit.f, &normed, &mut ctx)?;
                    let next = g.add(&x, &b)?;
                    (b, next.clone(), next)
                }
                NormPlacement::PostNorm => {
                    let b = self.apply_sublayer(g, &unit.f, &x, &mut ctx)?;
                    let y = g.add(&x, &b)?;
                    let next = unit.ln.apply(g, &y)?;
                    (b, next, y)
                }
            };
            branches.push(branch);
            ys.push(y);
            xs.push(next.clone());
            x = next;
        }
        Ok(StackTrace {
            x: xs,
            branch: branches,
            y: ys,
        })
    }

    fn apply_sublayer(
        &self,
        g: &mut Graph,
        f: &Sublayer,
        x: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        match f {
            Sublayer::Attn(a) => a.forward(g, x, x, x, None, 0.0, ctx),
            Sublayer::Ffn(f) => f.forward(g, x, ctx),
        }
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mat_add_assign(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let k = b.len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for kk in 0..k {
            let aik = a[i][kk];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i][j] += aik * b[kk][j];
            }
        }
    }
    out
}

fn random_input(cfg: &TinyStackConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_1234);
    (0..cfg.seq_len * cfg.d_model)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect()
}

/// Pre-norm check: assembles `I + sum_k dF_pre(x_k)/dx_l` from the recorded
/// branch outputs and compares it to the end-to-end Jacobian, for every tail
/// sub-span l..L.
pub fn check_prenorm_factorization(cfg: TinyStackConfig) -> Result<FactorizationCheck> {
    let cfg = TinyStackConfig::new(NormPlacement::PreNorm, cfg.depth, cfg.d_model, cfg.seq_len, cfg.seed)?;
    let stack = SublayerStack::new(cfg)?;
    check_prenorm_on(&stack)
}

pub(crate) fn check_prenorm_on(stack: &SublayerStack) -> Result<FactorizationCheck> {
    let cfg = stack.cfg;
    let mut g = Graph::new();
    let trace = stack.forward_trace(&mut g, &random_input(&cfg))?;
    let n = cfg.seq_len * cfg.d_model;
    let top = &trace.x[cfg.depth];

    let mut worst = 0.0f64;
    let mut stored: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    for l in 0..cfg.depth {
        let end_to_end = jacobian(&g, top, &trace.x[l])?;
        let mut assembled = identity(n);
        for b in &trace.branch[l..] {
            let jb = jacobian(&g, b, &trace.x[l])?;
            mat_add_assign(&mut assembled, &jb);
        }
        worst = worst.max(max_rel_error(&assembled, &end_to_end));
        if l == 0 {
            stored = Some((assembled, end_to_end));
        }
    }
    let (assembled_jacobian, end_to_end_jacobian) = stored.expect("depth >= 1");
    Ok(FactorizationCheck {
        placement: NormPlacement::PreNorm,
        depth: cfg.depth,
        assembled_jacobian,
        end_to_end_jacobian,
        max_rel_error: worst,
    })
}

/// The forward counterpart of the pre-norm factorization: the largest
/// entrywise gap of `x_L - x_l - sum_k F_pre(x_k)` over every l, with the sum
/// taken in forward order. Exact zero is expected.
pub fn prenorm_forward_identity_gap(cfg: TinyStackConfig) -> Result<f64> {
    let cfg = TinyStackConfig::new(NormPlacement::PreNorm, cfg.depth, cfg.d_model, cfg.seq_len, cfg.seed)?;
    let stack = SublayerStack::new(cfg)?;
    let mut g = Graph::new();
    let trace = stack.forward_trace(&mut g, &random_input(&cfg))?;
    let top = trace.x[cfg.depth].data();
    let mut worst = 0.0f64;
    for l in 0..cfg.depth {
        let mut acc = trace.x[l].data().to_vec();
        for b in &trace.branch[l..] {
            for (a, &v) in acc.iter_mut().zip(b.data()) {
                *a += v;
            }
        }
        for (a, t) in acc.iter().zip(top) {
            worst = worst.max((a - t).abs());
        }
    }
    Ok(worst)
}

/// Post-norm check: per unit `A_k = J_LN(y_k) . (I + dF(x_k)/dx_k)`, compared
/// as the interleaved product `A_{L-1} ... A_l` against the end-to-end
/// Jacobian for every tail sub-span.
pub fn check_postnorm_factorization(cfg: TinyStackConfig) -> Result<FactorizationCheck> {
    let cfg = TinyStackConfig::new(NormPlacement::PostNorm, cfg.depth, cfg.d_model, cfg.seq_len, cfg.seed)?;
    let stack = SublayerStack::new(cfg)?;
    check_postnorm_on(&stack)
}

pub(crate) fn check_postnorm_on(stack: &SublayerStack) -> Result<FactorizationCheck> {
    let cfg = stack.cfg;
    let mut g = Graph::new();
    let trace = stack.forward_trace(&mut g, &random_input(&cfg))?;
    let n = cfg.seq_len * cfg.d_model;
    let top = &trace.x[cfg.depth];

    // per-unit factors
    let mut factors = Vec::with_capacity(cfg.depth);
    for k in 0..cfg.depth {
        let j_ln = jacobian(&g, &trace.x[k + 1], &trace.y[k])?;
        let j_f = jacobian(&g, &trace.branch[k], &trace.x[k])?;
        let mut inner = identity(n);
        mat_add_assign(&mut inner, &j_f);
        factors.push(mat_mul(&j_ln, &inner));
    }

    let mut worst = 0.0f64;
    let mut stored: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    // build products from the top downwards: M_l = M_{l+1} . A_l
    let mut product = identity(n);
    for l in (0..cfg.depth).rev() {
        product = mat_mul(&product, &factors[l]);
        let end_to_end = jacobian(&g, top, &trace.x[l])?;
        worst = worst.max(max_rel_error(&product, &end_to_end));
        if l == 0 {
            stored = Some((product.clone(), end_to_end));
        }
    }
    let (assembled_jacobian, end_to_end_jacobian) = stored.expect("depth >= 1");
    Ok(FactorizationCheck {
        placement: NormPlacement::PostNorm,
        depth: cfg.depth,
        assembled_jacobian,
        end_to_end_jacobian,
        max_rel_error: worst,
    })
}
