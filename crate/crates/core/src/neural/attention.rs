use rand::Rng;

use super::affine::Affine;
use super::linalg::{gemm, matvec_add, matvec_t_add, outer_add};
use super::loss::softmax_in_place;
use super::tensor::{join_name, Params, Tensor};
use crate::error::{Error, Result};

/// Multi-head self-attention pooling with one scalar channel per head.
///
/// For a model width `d` there are `d` heads. Head `i` projects every state
/// to a scalar key and value, and the mean state to a scalar query; the
/// softmax over time of `query * key` weights the values into one scalar.
/// The `d` head outputs are concatenated and passed through an output
/// projection `d -> d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    dim: usize,
    /// `d x d`, row `i` is head `i`'s projection
    pub w_query: Tensor,
    pub b_query: Tensor,
    /// no bias: a per-head key offset shifts every score equally and cancels in the softmax
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub b_value: Tensor,
    pub output: Affine,
}

#[derive(Clone, Debug)]
pub struct AttentionRun {
    steps: usize,
    states: Vec<f64>,
    mean: Vec<f64>,
    query: Vec<f64>,
    /// `T x d`
    keys: Vec<f64>,
    values: Vec<f64>,
    /// `d x T`, row `i` sums to one
    weights: Vec<f64>,
    /// concatenated head outputs before the output projection
    pub heads: Vec<f64>,
    pub output: Vec<f64>,
}

impl AttentionRun {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Attention weights of head `i` over time.
    pub fn head_weights(&self, i: usize) -> &[f64] {
        &self.weights[i * self.steps..(i + 1) * self.steps]
    }

    pub fn num_heads(&self) -> usize {
        self.query.len()
    }
}

impl SelfAttention {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        let w_query = Tensor::uniform(&[dim, dim], bound, rng);
        let b_query = Tensor::uniform(&[dim], bound, rng);
        let w_key = Tensor::uniform(&[dim, dim], bound, rng);
        let w_value = Tensor::uniform(&[dim, dim], bound, rng);
        let b_value = Tensor::uniform(&[dim], bound, rng);
        SelfAttention {
            dim,
            w_query,
            b_query,
            w_key,
            w_value,
            b_value,
            output: Affine::new(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn project(&self, w: &Tensor, b: Option<&Tensor>, states: &[f64], steps: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(steps * d);
        for _ in 0..steps {
            match b {
                Some(b) => out.extend_from_slice(b.value()),
                None => out.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        gemm(steps, d, d, states, false, w.value(), true, 1.0, &mut out);
        out
    }

    /// `states` holds `steps` rows of width `d`.
    pub fn forward(&self, states: &[f64], steps: usize) -> Result<AttentionRun> {
        let d = self.dim;
        if steps == 0 {
            return Err(Error::domain("self-attention over an empty sequence"));
        }
        if states.len() != steps * d {
            return Err(Error::domain(format!(
                "self-attention input has {} values, expected {steps} x {d}",
                states.len()
            )));
        }
        let mut mean = vec![0.0; d];
        for row in states.chunks_exact(d) {
            for (m, s) in mean.iter_mut().zip(row) {
                *m += s;
            }
        }
        let inv = 1.0 / steps as f64;
        mean.iter_mut().for_each(|m| *m *= inv);

        let mut query = self.b_query.value().to_vec();
        matvec_add(self.w_query.value(), d, d, &mean, &mut query);
        let keys = self.project(&self.w_key, None, states, steps);
        let values = self.project(&self.w_value, Some(&self.b_value), states, steps);

        let mut weights = vec![0.0; d * steps];
        let mut heads = vec![0.0; d];
        for i in 0..d {
            let w = &mut weights[i * steps..(i + 1) * steps];
            for t in 0..steps {
                w[t] = query[i] * keys[t * d + i];
            }
            softmax_in_place(w);
            heads[i] = (0..steps).map(|t| w[t] * values[t * d + i]).sum();
        }
        let output = self.output.forward(&heads, 1)?;
        Ok(AttentionRun {
            steps,
            states: states.to_vec(),
            mean,
            query,
            keys,
            values,
            weights,
            heads,
            output,
        })
    }

    /// Accumulates gradients and returns `dL/dstates` (`T x d`).
    pub fn backward(&mut self, run: &AttentionRun, d_out: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let steps = run.steps;
        let d_heads = self.output.backward(&run.heads, 1, d_out);

        let mut d_keys = vec![0.0; steps * d];
        let mut d_values = vec![0.0; steps * d];
        let mut d_query = vec![0.0; d];
        let mut d_score = vec![0.0; steps];
        for i in 0..d {
            let w = run.head_weights(i);
            let dh = d_heads[i];
            let mut weighted = 0.0;
            for t in 0..steps {
                d_values[t * d + i] = w[t] * dh;
                let da = dh * run.values[t * d + i];
                d_score[t] = da;
                weighted += w[t] * da;
            }
            for t in 0..steps {
                let ds = w[t] * (d_score[t] - weighted);
                d_query[i] += ds * run.keys[t * d + i];
                d_keys[t * d + i] = ds * run.query[i];
            }
        }

        gemm(
            d,
            steps,
            d,
            &d_keys,
            true,
            &run.states,
            false,
            1.0,
            self.w_key.grad_mut(),
        );
        gemm(
            d,
            steps,
            d,
            &d_values,
            true,
            &run.states,
            false,
            1.0,
            self.w_value.grad_mut(),
        );
        for t in 0..steps {
            for i in 0..d {
                self.b_value.grad_mut()[i] += d_values[t * d + i];
            }
        }
        outer_add(self.w_query.grad_mut(), &d_query, &run.mean);
        for (g, dq) in self.b_query.grad_mut().iter_mut().zip(&d_query) {
            *g += dq;
        }

        let mut d_states = vec![0.0; steps * d];
        gemm(
            steps,
            d,
            d,
            &d_keys,
            false,
            self.w_key.value(),
            false,
            0.0,
            &mut d_states,
        );
        gemm(
            steps,
            d,
            d,
            &d_values,
            false,
            self.w_value.value(),
            false,
            1.0,
            &mut d_states,
        );
        let mut d_mean = vec![0.0; d];
        matvec_t_add(self.w_query.value(), d, d, &d_query, &mut d_mean);
        let inv = 1.0 / steps as f64;
        for row in d_states.chunks_exact_mut(d) {
            for (s, m) in row.iter_mut().zip(&d_mean) {
                *s += m * inv;
            }
        }
        d_states
    }
}

impl Params for SelfAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join_name(prefix, "w_query"), &self.w_query);
        f(&join_name(prefix, "b_query"), &self.b_query);
        f(&join_name(prefix, "w_key"), &self.w_key);
        f(&join_name(prefix, "w_value"), &self.w_value);
        f(&join_name(prefix, "b_value"), &self.b_value);
        self.output.visit(&join_name(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join_name(prefix, "w_query"), &mut self.w_query);
        f(&join_name(prefix, "b_query"), &mut self.b_query);
        f(&join_name(prefix, "w_key"), &mut self.w_key);
        f(&join_name(prefix, "w_value"), &mut self.w_value);
        f(&join_name(prefix, "b_value"), &mut self.b_value);
        self.output.visit_mut(&join_name(prefix, "output"), f);
    }
}
