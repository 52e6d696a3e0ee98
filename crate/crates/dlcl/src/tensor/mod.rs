//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tensor`] is an immutable row-major value, optionally bound to a node of
//! a [`Graph`]. Graphs are rebuilt on every forward pass; one backward pass
//! consumes the graph and populates gradients for every reachable node.

mod check;
mod graph;
mod param;

pub use check::{
    finite_difference_check, finite_difference_check_param, jacobian, max_rel_error, JACOBIAN_GUARD,
};
pub use graph::Graph;
pub use param::{Init, ParamStore, Parameter};

use std::sync::Arc;

use crate::error::{Error, Result};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense row-major f64 array with shape metadata.
///
/// Cheap to clone; the payload is shared. Tensors produced by graph ops carry
/// a node handle so gradients can be looked up after `backward`.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) graph_id: u64,
    pub(crate) node: Option<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) shape: Vec<usize>,
}

impl Tensor {
    /// A free tensor, not bound to any graph.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape does not cover {} elements", data.len()),
            });
        }
        Ok(Tensor {
            graph_id: 0,
            node: None,
            data: Arc::new(data),
            shape: shape.to_vec(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            graph_id: 0,
            node: None,
            data: Arc::new(vec![0.0; numel(shape)]),
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            graph_id: 0,
            node: None,
            data: Arc::new(vec![value]),
            shape: vec![],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single element of a scalar tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    pub(crate) fn bound_node(&self, graph_id: u64) -> Result<usize> {
        match self.node {
            None => Err(Error::Unbound),
            Some(id) if self.graph_id == graph_id => Ok(id),
            Some(_) => Err(Error::GraphMismatch),
        }
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}
