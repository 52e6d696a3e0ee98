//! The operation tape: forward kernels and their backward rules.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::param::Parameter;
use crate::tensor::{numel, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// A recorded operation; inputs are node indices into the owning graph.
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    Scale {
        x: usize,
        s: usize,
    },
    MatMul {
        lhs: usize,
        rhs: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        rhs_batched: bool,
    },
    Transpose(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    GatherRows {
        table: usize,
        ids: Arc<Vec<usize>>,
    },
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    MeanLast(usize),
    VarLast(usize),
    Log(usize),
    Sum(usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Arc<Vec<f64>>,
        inv_std: Arc<Vec<f64>>,
    },
    SplitHeads {
        x: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        heads: usize,
    },
    LabelSmoothedCe {
        logits: usize,
        targets: Arc<Vec<usize>>,
        pad_id: usize,
        epsilon: f64,
        token_count: usize,
    },
}

struct Node {
    op: Op,
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
    needs_grad: bool,
    param: Option<Parameter>,
}

/// Append-only operation tape. Node inputs always precede the node, so one
/// reverse sweep realizes the chain rule with fan-out accumulated by addition.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    bound_params: HashMap<u64, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            bound_params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op,
        data: Vec<f64>,
        shape: Vec<usize>,
        needs_grad: bool,
        param: Option<Parameter>,
    ) -> Tensor {
        self.push_arc(op, Arc::new(data), shape, needs_grad, param)
    }

    fn push_arc(
        &mut self,
        op: Op,
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        needs_grad: bool,
        param: Option<Parameter>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            data: data.clone(),
            shape: shape.clone(),
            needs_grad,
            param,
        });
        Tensor {
            graph_id: self.id,
            node: Some(id),
            data,
            shape,
        }
    }

    fn node_of(&self, t: &Tensor) -> Result<usize> {
        t.bound_node(self.id)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ---- leaves ------------------------------------------------------------

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "constant",
                shape: shape.to_vec(),
                reason: format!("shape does not cover {} elements", data.len()),
            });
        }
        Ok(self.push(Op::Leaf, data, shape.to_vec(), false, None))
    }

    pub fn constant_from(&mut self, t: &Tensor) -> Tensor {
        self.push_arc(Op::Leaf, t.data.clone(), t.shape.clone(), false, None)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(Op::Leaf, vec![v], vec![], false, None)
    }

    /// A differentiable leaf, e.g. the probe point of a gradient check.
    pub fn variable(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "variable",
                shape: shape.to_vec(),
                reason: format!("shape does not cover {} elements", data.len()),
            });
        }
        Ok(self.push(Op::Leaf, data, shape.to_vec(), true, None))
    }

    pub fn variable_from(&mut self, t: &Tensor) -> Tensor {
        self.push_arc(Op::Leaf, t.data.clone(), t.shape.clone(), true, None)
    }

    /// Binds a parameter as a leaf, snapshotting its current value. Repeated
    /// binds of the same parameter return the same node so fan-out gradients
    /// accumulate correctly.
    pub fn bind(&mut self, p: &Parameter) -> Tensor {
        if let Some(&id) = self.bound_params.get(&p.id()) {
            let node = &self.nodes[id];
            return Tensor {
                graph_id: self.id,
                node: Some(id),
                data: node.data.clone(),
                shape: node.shape.clone(),
            };
        }
        let t = self.push(
            Op::Leaf,
            p.value().clone(),
            p.shape().to_vec(),
            p.trainable(),
            Some(p.clone()),
        );
        self.bound_params.insert(p.id(), t.node.unwrap());
        t
    }

    // ---- elementwise and scalar ops ----------------------------------------

    fn binary_same_shape(&mut self, op_name: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
        let ia = self.node_of(a)?;
        let ib = self.node_of(b)?;
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = self.binary_same_shape("add", a, b)?;
        let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(Op::Add(ia, ib), data, a.shape.clone(), ng, None))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = self.binary_same_shape("sub", a, b)?;
        let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect();
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(Op::Sub(ia, ib), data, a.shape.clone(), ng, None))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = self.binary_same_shape("mul", a, b)?;
        let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(Op::Mul(ia, ib), data, a.shape.clone(), ng, None))
    }

    pub fn scalar_mul(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let data = a.data.iter().map(|x| c * x).collect();
        let ng = self.needs(ia);
        Ok(self.push(Op::ScalarMul(ia, c), data, a.shape.clone(), ng, None))
    }

    /// Multiplies a tensor by a scalar-shaped tensor (e.g. a learnable
    /// weight); gradients flow to both operands.
    pub fn scale(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let is = self.node_of(s)?;
        if !s.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scale",
                lhs: x.shape.clone(),
                rhs: s.shape.clone(),
            });
        }
        let c = s.data[0];
        let data = x.data.iter().map(|v| c * v).collect();
        let ng = self.needs(ix) || self.needs(is);
        Ok(self.push(Op::Scale { x: ix, s: is }, data, x.shape.clone(), ng, None))
    }

    // ---- linear algebra -----------------------------------------------------

    /// `[m,k]x[k,n]`, `[b,m,k]x[b,k,n]`, or `[b,m,k]x[k,n]` (shared rhs).
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let ib = self.node_of(b)?;
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        };
        let (batch, m, k, n, rhs_batched, out_shape) = match (a.shape.as_slice(), b.shape.as_slice()) {
            ([m, k], [k2, n]) => {
                if k != k2 {
                    return Err(mismatch());
                }
                (1, *m, *k, *n, false, vec![*m, *n])
            }
            ([ba, m, k], [bb, k2, n]) => {
                if k != k2 || ba != bb {
                    return Err(mismatch());
                }
                (*ba, *m, *k, *n, true, vec![*ba, *m, *n])
            }
            ([ba, m, k], [k2, n]) => {
                if k != k2 {
                    return Err(mismatch());
                }
                (*ba, *m, *k, *n, false, vec![*ba, *m, *n])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let av = &a.data[bi * m * k..(bi + 1) * m * k];
            let bv = if rhs_batched {
                &b.data[bi * k * n..(bi + 1) * k * n]
            } else {
                &b.data[..]
            };
            let ov = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let arow = &av[i * k..i * k + k];
                let orow = &mut ov[i * n..i * n + n];
                for (kk, &aik) in arow.iter().enumerate() {
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[kk * n..kk * n + n];
                    for (o, &bv_j) in orow.iter_mut().zip(brow) {
                        *o += aik * bv_j;
                    }
                }
            }
        }
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(
            Op::MatMul {
                lhs: ia,
                rhs: ib,
                batch,
                m,
                k,
                n,
                rhs_batched,
            },
            out,
            out_shape,
            ng,
            None,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let rank = a.shape.len();
        if rank < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: a.shape.clone(),
                reason: "rank must be at least 2".into(),
            });
        }
        let (r, c) = (a.shape[rank - 2], a.shape[rank - 1]);
        let batch = numel(&a.shape[..rank - 2]);
        let mut out = vec![0.0; a.numel()];
        for bi in 0..batch {
            let src = &a.data[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = a.shape.clone();
        shape.swap(rank - 2, rank - 1);
        let ng = self.needs(ia);
        Ok(self.push(Op::Transpose(ia), out, shape, ng, None))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        if numel(shape) != a.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("target does not cover {} elements", a.numel()),
            });
        }
        let ng = self.needs(ia);
        Ok(self.push_arc(Op::Reshape(ia), a.data.clone(), shape.to_vec(), ng, None))
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let rank = parts[0].shape.len();
        if axis >= rank {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: parts[0].shape.clone(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut ids = Vec::with_capacity(parts.len());
        for p in parts {
            ids.push(self.node_of(p)?);
            let same = p.shape.len() == rank
                && p.shape
                    .iter()
                    .zip(parts[0].shape.iter())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer = numel(&parts[0].shape[..axis]);
        let post = numel(&parts[0].shape[axis + 1..]);
        let axis_total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut shape = parts[0].shape.clone();
        shape[axis] = axis_total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let inner = p.shape[axis] * post;
                out.extend_from_slice(&p.data[o * inner..(o + 1) * inner]);
            }
        }
        let ng = ids.iter().any(|&i| self.needs(i));
        Ok(self.push(Op::Concat { inputs: ids, axis }, out, shape, ng, None))
    }

    /// Gathers rows of a `[v, d]` table: output row i is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let it = self.node_of(table)?;
        let [v, d] = table.shape.as_slice() else {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: table.shape.clone(),
                reason: "table must be rank 2".into(),
            });
        };
        let (v, d) = (*v, *d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&table.data[id * d..(id + 1) * d]);
        }
        let ng = self.needs(it);
        Ok(self.push(
            Op::GatherRows {
                table: it,
                ids: Arc::new(ids.to_vec()),
            },
            out,
            vec![ids.len(), d],
            ng,
            None,
        ))
    }

    // ---- nonlinearities and reductions --------------------------------------

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let data = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let ng = self.needs(ia);
        Ok(self.push(Op::Relu(ia), data, a.shape.clone(), ng, None))
    }

    fn last_dim(&self, op: &'static str, a: &Tensor) -> Result<usize> {
        match a.shape.last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::InvalidShape {
                op,
                shape: a.shape.clone(),
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    /// Softmax over the last axis. `-inf` entries get exactly zero weight.
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let d = self.last_dim("softmax", a)?;
        let mut out = vec![0.0; a.numel()];
        for (row, orow) in a.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            softmax_row(row, orow);
        }
        let ng = self.needs(ia);
        Ok(self.push(Op::Softmax(ia), out, a.shape.clone(), ng, None))
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let d = self.last_dim("log_softmax", a)?;
        let mut out = vec![0.0; a.numel()];
        for (row, orow) in a.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let lse = log_sum_exp(row);
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let ng = self.needs(ia);
        Ok(self.push(Op::LogSoftmax(ia), out, a.shape.clone(), ng, None))
    }

    /// Per-row mean over the last axis; drops that axis.
    pub fn mean_last(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let d = self.last_dim("mean_last", a)?;
        let out: Vec<f64> = a
            .data
            .chunks_exact(d)
            .map(|row| row.iter().sum::<f64>() / d as f64)
            .collect();
        let shape = a.shape[..a.shape.len() - 1].to_vec();
        let ng = self.needs(ia);
        Ok(self.push(Op::MeanLast(ia), out, shape, ng, None))
    }

    /// Per-row population variance over the last axis; drops that axis.
    pub fn var_last(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let d = self.last_dim("var_last", a)?;
        let out: Vec<f64> = a
            .data
            .chunks_exact(d)
            .map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64
            })
            .collect();
        let shape = a.shape[..a.shape.len() - 1].to_vec();
        let ng = self.needs(ia);
        Ok(self.push(Op::VarLast(ia), out, shape, ng, None))
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let data = a.data.iter().map(|&x| x.ln()).collect();
        let ng = self.needs(ia);
        Ok(self.push(Op::Log(ia), data, a.shape.clone(), ng, None))
    }

    /// Sum of all elements; yields a scalar of shape `[]`.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let s: f64 = a.data.iter().sum();
        let ng = self.needs(ia);
        Ok(self.push(Op::Sum(ia), vec![s], vec![], ng, None))
    }

    // ---- fused network kernels ----------------------------------------------

    /// Adds a `[d]` vector to every row of a `[..., d]` tensor.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let ib = self.node_of(bias)?;
        let d = self.last_dim("add_bias", x)?;
        if bias.shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data.chunks_exact(d) {
            out.extend(row.iter().zip(bias.data.iter()).map(|(a, b)| a + b));
        }
        let ng = self.needs(ix) || self.needs(ib);
        Ok(self.push(Op::AddBias { x: ix, bias: ib }, out, x.shape.clone(), ng, None))
    }

    /// Row-wise layer normalization over the last axis with learnable gain
    /// and bias: `(x - mean) / sqrt(var + eps) * gain + bias`, population
    /// variance.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let ig = self.node_of(gain)?;
        let ib = self.node_of(bias)?;
        let d = self.last_dim("layer_norm", x)?;
        if gain.shape != [d] || bias.shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: if gain.shape != [d] {
                    gain.shape.clone()
                } else {
                    bias.shape.clone()
                },
            });
        }
        let rows = x.numel() / d;
        let mut out = vec![0.0; x.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for (row, orow) in x.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for ((o, &v), (&g, &b)) in orow
                .iter_mut()
                .zip(row)
                .zip(gain.data.iter().zip(bias.data.iter()))
            {
                *o = (v - mean) * inv_std * g + b;
            }
        }
        let ng = self.needs(ix) || self.needs(ig) || self.needs(ib);
        Ok(self.push(
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                mean: Arc::new(means),
                inv_std: Arc::new(inv_stds),
            },
            out,
            x.shape.clone(),
            ng,
            None,
        ))
    }

    /// `[b, t, h*dk] -> [b*h, t, dk]`.
    pub fn split_heads(&mut self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let [b, t, d] = x.shape.as_slice() else {
            return Err(Error::InvalidShape {
                op: "split_heads",
                shape: x.shape.clone(),
                reason: "expected rank 3".into(),
            });
        };
        let (b, t, d) = (*b, *t, *d);
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidShape {
                op: "split_heads",
                shape: x.shape.clone(),
                reason: format!("{heads} heads do not divide width {d}"),
            });
        }
        let dk = d / heads;
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for hi in 0..heads {
                for ti in 0..t {
                    let src = (bi * t + ti) * d + hi * dk;
                    let dst = ((bi * heads + hi) * t + ti) * dk;
                    out[dst..dst + dk].copy_from_slice(&x.data[src..src + dk]);
                }
            }
        }
        let ng = self.needs(ix);
        Ok(self.push(Op::SplitHeads { x: ix, heads }, out, vec![b * heads, t, dk], ng, None))
    }

    /// `[b*h, t, dk] -> [b, t, h*dk]`; inverse of `split_heads`.
    pub fn merge_heads(&mut self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let [bh, t, dk] = x.shape.as_slice() else {
            return Err(Error::InvalidShape {
                op: "merge_heads",
                shape: x.shape.clone(),
                reason: "expected rank 3".into(),
            });
        };
        let (bh, t, dk) = (*bh, *t, *dk);
        if heads == 0 || bh % heads != 0 {
            return Err(Error::InvalidShape {
                op: "merge_heads",
                shape: x.shape.clone(),
                reason: format!("{heads} heads do not divide leading dim {bh}"),
            });
        }
        let b = bh / heads;
        let d = heads * dk;
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for hi in 0..heads {
                for ti in 0..t {
                    let src = ((bi * heads + hi) * t + ti) * dk;
                    let dst = (bi * t + ti) * d + hi * dk;
                    out[dst..dst + dk].copy_from_slice(&x.data[src..src + dk]);
                }
            }
        }
        let ng = self.needs(ix);
        Ok(self.push(Op::MergeHeads { x: ix, heads }, out, vec![b, t, d], ng, None))
    }

    /// Label-smoothed cross entropy over `[n, vocab]` logits, averaged over
    /// non-pad targets. Returns the scalar loss and the token count.
    pub fn label_smoothed_ce(
        &mut self,
        logits: &Tensor,
        targets: &[usize],
        pad_id: usize,
        epsilon: f64,
    ) -> Result<(Tensor, usize)> {
        let il = self.node_of(logits)?;
        let [n, v] = logits.shape.as_slice() else {
            return Err(Error::InvalidShape {
                op: "label_smoothed_ce",
                shape: logits.shape.clone(),
                reason: "expected rank 2 logits".into(),
            });
        };
        let (n, v) = (*n, *v);
        if targets.len() != n {
            return Err(Error::InvalidShape {
                op: "label_smoothed_ce",
                shape: vec![targets.len()],
                reason: format!("expected {n} targets"),
            });
        }
        for &t in targets {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
        }
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let uniform = epsilon / v as f64;
        let mut total = 0.0;
        for (row, &t) in logits.data.chunks_exact(v).zip(targets) {
            if t == pad_id {
                continue;
            }
            let lse = log_sum_exp(row);
            let row_sum: f64 = row.iter().sum();
            total += lse - (1.0 - epsilon) * row[t] - uniform * row_sum;
        }
        let loss = total / count as f64;
        let ng = self.needs(il);
        let t = self.push(
            Op::LabelSmoothedCe {
                logits: il,
                targets: Arc::new(targets.to_vec()),
                pad_id,
                epsilon,
                token_count: count,
            },
            vec![loss],
            vec![],
            ng,
            None,
        );
        Ok((t, count))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Populates gradients for every
    /// reachable node and accumulates them into bound trainable parameters.
    /// A graph can be consumed only once.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        let root = self.node_of(loss)?;
        if !loss.is_scalar() {
            return Err(Error::NotScalar {
                shape: loss.shape.clone(),
            });
        }
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        let mut grads = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        self.run_reverse(&mut grads, root);
        for node in &self.nodes {
            if let Some(p) = &node.param {
                if p.trainable() {
                    // Unreachable parameters still get an explicit zero grad.
                    let idx = self.bound_params[&p.id()];
                    match &grads[idx] {
                        Some(g) => p.accumulate_grad(g),
                        None => p.accumulate_grad(&vec![0.0; p.numel()]),
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass at `t`, if any reached it.
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.bound_node(self.id).ok()?;
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Vector-Jacobian product: gradients of `dot(seed, output)` with respect
    /// to every node. Does not consume the graph or touch parameter grads.
    pub(crate) fn vjp(&self, output: &Tensor, seed: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let root = self.node_of(output)?;
        assert_eq!(seed.len(), output.numel());
        let mut grads = vec![None; self.nodes.len()];
        grads[root] = Some(seed.to_vec());
        self.run_reverse(&mut grads, root);
        Ok(grads)
    }

    pub(crate) fn node_grad<'a>(
        &self,
        grads: &'a [Option<Vec<f64>>],
        t: &Tensor,
    ) -> Result<Option<&'a [f64]>> {
        let id = self.node_of(t)?;
        Ok(grads[id].as_deref())
    }

    fn run_reverse(&self, grads: &mut [Option<Vec<f64>>], root: usize) {
        for i in (0..=root).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.apply_backward(i, &g, grads);
            grads[i] = Some(g);
        }
    }

    fn acc<F>(&self, grads: &mut [Option<Vec<f64>>], idx: usize, f: F)
    where
        F: FnOnce(&mut [f64]),
    {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let buf = grads[idx].get_or_insert_with(|| vec![0.0; self.nodes[idx].data.len()]);
        f(buf);
    }

    fn apply_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.nodes[*a].data.clone(), self.nodes[*b].data.clone());
                self.acc(grads, *a, |buf| {
                    for ((o, &gi), &bv) in buf.iter_mut().zip(g).zip(db.iter()) {
                        *o += gi * bv;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, &gi), &av) in buf.iter_mut().zip(g).zip(da.iter()) {
                        *o += gi * av;
                    }
                });
            }
            Op::ScalarMul(a, c) => {
                let c = *c;
                self.acc(grads, *a, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                });
            }
            Op::Scale { x, s } => {
                let c = self.nodes[*s].data[0];
                let xd = self.nodes[*x].data.clone();
                self.acc(grads, *x, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                });
                self.acc(grads, *s, |buf| {
                    let mut dot = 0.0;
                    for (&gi, &xi) in g.iter().zip(xd.iter()) {
                        dot += gi * xi;
                    }
                    buf[0] += dot;
                });
            }
            Op::MatMul {
                lhs,
                rhs,
                batch,
                m,
                k,
                n,
                rhs_batched,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let a = self.nodes[*lhs].data.clone();
                let b = self.nodes[*rhs].data.clone();
                // dA[b] += g[b] . B[b]^T
                self.acc(grads, *lhs, |buf| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bv = if *rhs_batched {
                            &b[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &b[..]
                        };
                        let ab = &mut buf[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let grow = &gb[i * n..i * n + n];
                            for kk in 0..k {
                                let brow = &bv[kk * n..kk * n + n];
                                let mut s = 0.0;
                                for (gj, bj) in grow.iter().zip(brow) {
                                    s += gj * bj;
                                }
                                ab[i * k + kk] += s;
                            }
                        }
                    }
                });
                // dB[b] += A[b]^T . g[b], summed over the batch for a shared rhs
                self.acc(grads, *rhs, |buf| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let av = &a[bi * m * k..(bi + 1) * m * k];
                        let off = if *rhs_batched { bi * k * n } else { 0 };
                        for i in 0..m {
                            let arow = &av[i * k..i * k + k];
                            let grow = &gb[i * n..i * n + n];
                            for (kk, &aik) in arow.iter().enumerate() {
                                if aik == 0.0 {
                                    continue;
                                }
                                let brow = &mut buf[off + kk * n..off + kk * n + n];
                                for (o, &gj) in brow.iter_mut().zip(grow) {
                                    *o += aik * gj;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let rank = node.shape.len();
                let (r, c) = (node.shape[rank - 2], node.shape[rank - 1]);
                let batch = numel(&node.shape[..rank - 2]);
                self.acc(grads, *a, |buf| {
                    for bi in 0..batch {
                        let gb = &g[bi * r * c..(bi + 1) * r * c];
                        let ob = &mut buf[bi * r * c..(bi + 1) * r * c];
                        for i in 0..r {
                            for j in 0..c {
                                // out[i,j] came from in[j,i]
                                ob[j * r + i] += gb[i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let post = numel(&node.shape[*axis + 1..]);
                let total_inner = node.shape[*axis] * post;
                let mut offset = 0;
                for &inp in inputs {
                    let inner = self.nodes[inp].shape[*axis] * post;
                    self.acc(grads, inp, |buf| {
                        for o in 0..outer {
                            let src = &g[o * total_inner + offset..o * total_inner + offset + inner];
                            let dst = &mut buf[o * inner..(o + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += inner;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = node.shape[1];
                let ids = ids.clone();
                self.acc(grads, *table, |buf| {
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dst = &mut buf[id * d..(id + 1) * d];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].data.clone();
                self.acc(grads, *a, |buf| {
                    for ((o, &gi), &xv) in buf.iter_mut().zip(g).zip(x.iter()) {
                        if xv > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.data.clone();
                let d = *node.shape.last().expect("softmax rank");
                self.acc(grads, *a, |buf| {
                    for ((orow, grow), yrow) in buf
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.data.clone();
                let d = *node.shape.last().expect("log_softmax rank");
                self.acc(grads, *a, |buf| {
                    for ((orow, grow), yrow) in buf
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gi - yi.exp() * gsum;
                        }
                    }
                });
            }
            Op::MeanLast(a) => {
                let d = *self.nodes[*a].shape.last().expect("mean_last rank");
                let inv = 1.0 / d as f64;
                self.acc(grads, *a, |buf| {
                    for (orow, &gi) in buf.chunks_exact_mut(d).zip(g) {
                        for o in orow {
                            *o += gi * inv;
                        }
                    }
                });
            }
            Op::VarLast(a) => {
                let x = self.nodes[*a].data.clone();
                let d = *self.nodes[*a].shape.last().expect("var_last rank");
                let inv = 1.0 / d as f64;
                self.acc(grads, *a, |buf| {
                    for ((orow, xrow), &gi) in buf.chunks_exact_mut(d).zip(x.chunks_exact(d)).zip(g) {
                        let mean = xrow.iter().sum::<f64>() * inv;
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o += gi * 2.0 * (xv - mean) * inv;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = self.nodes[*a].data.clone();
                self.acc(grads, *a, |buf| {
                    for ((o, &gi), &xv) in buf.iter_mut().zip(g).zip(x.iter()) {
                        *o += gi / xv;
                    }
                });
            }
            Op::Sum(a) => {
                let gi = g[0];
                self.acc(grads, *a, |buf| {
                    for o in buf {
                        *o += gi;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let d = self.nodes[*bias].shape[0];
                self.acc(grads, *x, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for grow in g.chunks_exact(d) {
                        for (o, &gi) in buf.iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let xd = self.nodes[*x].data.clone();
                let gd = self.nodes[*gain].data.clone();
                let d = self.nodes[*gain].shape[0];
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                self.acc(grads, *x, |buf| {
                    for (r, (orow, (xrow, grow))) in buf
                        .chunks_exact_mut(d)
                        .zip(xd.chunks_exact(d).zip(g.chunks_exact(d)))
                        .enumerate()
                    {
                        let (mu, is) = (mean[r], inv_std[r]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ((&gi, &gm), &xv) in grow.iter().zip(gd.iter()).zip(xrow) {
                            let dxhat = gi * gm;
                            m1 += dxhat;
                            m2 += dxhat * (xv - mu) * is;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for ((o, (&gi, &gm)), &xv) in orow
                            .iter_mut()
                            .zip(grow.iter().zip(gd.iter()))
                            .zip(xrow)
                        {
                            let xhat = (xv - mu) * is;
                            *o += is * (gi * gm - m1 - xhat * m2);
                        }
                    }
                });
                self.acc(grads, *gain, |buf| {
                    for (r, (xrow, grow)) in xd.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        let (mu, is) = (mean[r], inv_std[r]);
                        for ((o, &gi), &xv) in buf.iter_mut().zip(grow).zip(xrow) {
                            *o += gi * (xv - mu) * is;
                        }
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for grow in g.chunks_exact(d) {
                        for (o, &gi) in buf.iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let [bh, t, dk] = node.shape.as_slice() else {
                    unreachable!();
                };
                let (bh, t, dk, heads) = (*bh, *t, *dk, *heads);
                let b = bh / heads;
                let d = heads * dk;
                self.acc(grads, *x, |buf| {
                    for bi in 0..b {
                        for hi in 0..heads {
                            for ti in 0..t {
                                let src = ((bi * heads + hi) * t + ti) * dk;
                                let dst = (bi * t + ti) * d + hi * dk;
                                for j in 0..dk {
                                    buf[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let [b, t, d] = node.shape.as_slice() else {
                    unreachable!();
                };
                let (b, t, d, heads) = (*b, *t, *d, *heads);
                let dk = d / heads;
                self.acc(grads, *x, |buf| {
                    for bi in 0..b {
                        for hi in 0..heads {
                            for ti in 0..t {
                                let src = (bi * t + ti) * d + hi * dk;
                                let dst = ((bi * heads + hi) * t + ti) * dk;
                                for j in 0..dk {
                                    buf[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::LabelSmoothedCe {
                logits,
                targets,
                pad_id,
                epsilon,
                token_count,
            } => {
                let ld = self.nodes[*logits].data.clone();
                let v = self.nodes[*logits].shape[1];
                let uniform = epsilon / v as f64;
                let w = g[0] / *token_count as f64;
                let targets = targets.clone();
                let (pad_id, epsilon) = (*pad_id, *epsilon);
                self.acc(grads, *logits, |buf| {
                    let mut probs = vec![0.0; v];
                    for ((orow, lrow), &t) in
                        buf.chunks_exact_mut(v).zip(ld.chunks_exact(v)).zip(targets.iter())
                    {
                        if t == pad_id {
                            continue;
                        }
                        softmax_row(lrow, &mut probs);
                        for (j, (o, &p)) in orow.iter_mut().zip(probs.iter()).enumerate() {
                            let q = if j == t { 1.0 - epsilon + uniform } else { uniform };
                            *o += w * (p - q);
                        }
                    }
                });
            }
        }
    }
}

/// Stable softmax of one row. `-inf` inputs yield exactly zero.
fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() };
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Stable log(sum(exp(row))).
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
        .sum();
    max + sum.ln()
}
