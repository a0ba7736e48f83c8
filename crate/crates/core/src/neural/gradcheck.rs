//! Central finite-difference oracle for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Params;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<Mismatch>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some(Mismatch {
                name: name.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

/// Checks `analytic` against central differences of `f` around `params`.
pub fn grad_check(params: &[f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    assert!(h > 0.0);
    let mut report = GradCheckReport::default();
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        report.record("", i, analytic[i], (up - down) / (2.0 * h));
    }
    report
}

/// Which coordinates of each parameter tensor to perturb.
#[derive(Copy, Clone, Debug)]
pub enum Coordinates {
    All,
    /// Up to `per_tensor` coordinates per tensor, chosen with `seed`.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

fn set_value(model: &mut impl Params, tensor: usize, index: usize, value: f64) {
    let mut k = 0;
    model.visit_mut("", &mut |_, t| {
        if k == tensor {
            t.value_mut()[index] = value;
        }
        k += 1;
    });
}

/// Compares the gradients currently accumulated in `model` with central
/// differences of `loss`, which must evaluate the same scalar without
/// touching gradients.
pub fn check_gradients<M: Params>(
    model: &mut M,
    h: f64,
    coords: Coordinates,
    mut loss: impl FnMut(&M) -> f64,
) -> GradCheckReport {
    let mut tensors = Vec::new();
    model.visit("", &mut |name, t| {
        tensors.push((name.to_string(), t.value().to_vec(), t.grad().to_vec()))
    });
    let mut rng = match coords {
        Coordinates::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    let mut report = GradCheckReport::default();
    for (ti, (name, values, grads)) in tensors.iter().enumerate() {
        let picked: Vec<usize> = match (coords, rng.as_mut()) {
            (Coordinates::Sample { per_tensor, .. }, Some(r)) if values.len() > per_tensor => {
                let mut v = sample(r, values.len(), per_tensor).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..values.len()).collect(),
        };
        for i in picked {
            let orig = values[i];
            set_value(model, ti, i, orig + h);
            let up = loss(model);
            set_value(model, ti, i, orig - h);
            let down = loss(model);
            set_value(model, ti, i, orig);
            report.record(name, i, grads[i], (up - down) / (2.0 * h));
        }
    }
    report
}
