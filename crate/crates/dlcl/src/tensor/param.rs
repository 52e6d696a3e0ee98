//! Named trainable parameters and their registry.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::numel;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Initialization scheme for a freshly allocated parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), fans taken from a
    /// `[fan_in, fan_out]` shape.
    XavierUniform,
    Normal {
        std: f64,
    },
}

struct ParamInner {
    id: u64,
    name: String,
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    trainable: bool,
}

/// A named model parameter. Clones share the same storage.
///
/// The value buffer may only be mutated between forward passes; graphs
/// snapshot it when the parameter is bound.
#[derive(Clone)]
pub struct Parameter(Rc<ParamInner>);

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>, trainable: bool) -> Result<Self> {
        let name = name.into();
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "parameter",
                shape: shape.to_vec(),
                reason: format!("{name}: shape does not cover {} elements", data.len()),
            });
        }
        Ok(Parameter(Rc::new(ParamInner {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name,
            shape: shape.to_vec(),
            value: RefCell::new(data),
            grad: RefCell::new(None),
            trainable,
        })))
    }

    pub fn scalar(name: impl Into<String>, value: f64, trainable: bool) -> Self {
        Parameter::new(name, &[], vec![value], trainable).expect("scalar shape")
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable
    }

    pub fn value(&self) -> Ref<'_, Vec<f64>> {
        self.0.value.borrow()
    }

    pub fn set_value(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "set_value on {}", self.name());
        *self.0.value.borrow_mut() = data;
    }

    /// The accumulated gradient, or zeros when nothing reached this parameter.
    pub fn grad(&self) -> Vec<f64> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    /// Adds `g` into the gradient buffer (allocating it on first use).
    pub fn accumulate_grad(&self, g: &[f64]) {
        assert_eq!(g.len(), self.numel(), "grad size on {}", self.name());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn scale_grad(&self, s: f64) {
        if let Some(buf) = self.0.grad.borrow_mut().as_mut() {
            for v in buf.iter_mut() {
                *v *= s;
            }
        }
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name())
            .field("shape", &self.shape())
            .field("trainable", &self.trainable())
            .finish()
    }
}

/// Ordered registry of a model's parameters. Iteration follows insertion
/// order, which keeps checkpoints and optimizer state deterministic.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates, initializes and registers a new parameter.
    pub fn alloc(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Parameter {
        let name = name.into();
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::XavierUniform => {
                let (fan_in, fan_out) = match shape {
                    [i, o] => (*i, *o),
                    _ => (n, n),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("normal std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        let p = Parameter::new(name.clone(), shape, data, trainable).expect("alloc shape");
        self.register(p.clone());
        p
    }

    /// Registers an externally created parameter. Names must be unique.
    pub fn register(&mut self, p: Parameter) {
        let name = p.name().to_string();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name, self.params.len());
        self.params.push(p);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn scale_grads(&self, s: f64) {
        for p in &self.params {
            p.scale_grad(s);
        }
    }

    /// Number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}
