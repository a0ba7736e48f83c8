use rand::Rng;

use crate::error::{Error, Result};

/// Real-valued array with a same-shaped gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], value: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if value.len() != n {
            return Err(Error::domain(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                value.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            value,
        })
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.value {
            *v = rng.random_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut [f64] {
        &mut self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }
}

/// Anything owning trainable tensors. Visitation order is the declaration
/// order and must be stable: it keys optimizer state and checkpoint layout.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }

    /// Concatenated gradients in visitation order.
    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(t.grad()));
        out
    }

    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(t.value()));
        out
    }
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
