use crate::error::{Error, Result};

/// Numerically stable softmax with max subtraction.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `dL/dlogits`, same layout as the logits
    pub grad: Vec<f64>,
}

fn validate(logits: &[f64], classes: usize, labels: &[usize]) -> Result<usize> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::domain(format!(
            "{} logits do not match {} labels x {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("non-finite logit {v}")));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::domain(format!("label {y} out of range for {classes} classes")));
    }
    Ok(labels.len())
}

/// `(1/n) * sum_i w_i * -log softmax(z_i)[y_i]` and its gradient.
pub fn weighted_cross_entropy(logits: &[f64], classes: usize, labels: &[usize], weights: &[f64]) -> Result<LossOutput> {
    let n = validate(logits, classes, labels)?;
    if weights.len() != n {
        return Err(Error::domain(format!("{} weights for {n} samples", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::domain(format!("invalid sample weight {w}")));
    }
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..n {
        let z = &logits[i * classes..(i + 1) * classes];
        let nll = log_sum_exp(z) - z[labels[i]];
        loss += weights[i] * nll;
        let g = &mut grad[i * classes..(i + 1) * classes];
        g.copy_from_slice(z);
        softmax_in_place(g);
        g[labels[i]] -= 1.0;
        let scale = weights[i] * inv_n;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(LossOutput {
        loss: loss * inv_n,
        grad,
    })
}

/// Unweighted mean cross-entropy.
pub fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> Result<LossOutput> {
    weighted_cross_entropy(logits, classes, labels, &vec![1.0; labels.len()])
}
