use rand::Rng;

use super::linalg::gemm;
use super::tensor::{join_name, Params, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer `y = x W + b` over row-major batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    d_in: usize,
    d_out: usize,
    /// `d_in x d_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        Affine {
            d_in,
            d_out,
            weight: Tensor::uniform(&[d_in, d_out], bound, rng),
            bias: Tensor::uniform(&[d_out], bound, rng),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            (&[d_in, d_out], &[b]) if b == d_out => Ok(Affine {
                d_in,
                d_out,
                weight,
                bias,
            }),
            (w, b) => Err(Error::domain(format!(
                "affine shapes disagree: weight {w:?}, bias {b:?}"
            ))),
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// `x` holds `n` rows of width `d_in`.
    pub fn forward(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if x.len() != n * self.d_in {
            return Err(Error::domain(format!(
                "affine input has {} values, expected {n} x {}",
                x.len(),
                self.d_in
            )));
        }
        let mut y = Vec::with_capacity(n * self.d_out);
        for _ in 0..n {
            y.extend_from_slice(self.bias.value());
        }
        gemm(
            n,
            self.d_in,
            self.d_out,
            x,
            false,
            self.weight.value(),
            false,
            1.0,
            &mut y,
        );
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], n: usize, dy: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), n * self.d_in);
        assert_eq!(dy.len(), n * self.d_out);
        gemm(
            self.d_in,
            n,
            self.d_out,
            x,
            true,
            dy,
            false,
            1.0,
            self.weight.grad_mut(),
        );
        let db = self.bias.grad_mut();
        for row in dy.chunks_exact(self.d_out) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; n * self.d_in];
        gemm(
            n,
            self.d_out,
            self.d_in,
            dy,
            false,
            self.weight.value(),
            true,
            0.0,
            &mut dx,
        );
        dx
    }
}

impl Params for Affine {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join_name(prefix, "weight"), &self.weight);
        f(&join_name(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: Vec<f64>, b: Vec<f64>, d_in: usize, d_out: usize) -> Affine {
        Affine::from_parts(
            Tensor::from_vec(&[d_in, d_out], w).unwrap(),
            Tensor::from_vec(&[d_out], b).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_passes_input_through() {
        let a = layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        assert_eq!(a.forward(&[0.5, -2.0, 3.0, 4.0], 2).unwrap(), [0.5, -2.0, 3.0, 4.0]);
    }

    #[test]
    fn hand_arithmetic() {
        let a = layer(vec![1.0, 0.0, 0.0, 1.0], vec![3.0, 3.0], 2, 2);
        assert_eq!(a.forward(&[1.0, 2.0], 1).unwrap(), [4.0, 5.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        assert!(a.forward(&[1.0, 2.0, 3.0], 1).is_err());
        let bad = Affine::from_parts(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2]));
        assert!(bad.is_err());
    }
}
