use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub probs: Array1<f64>,
}

impl Distribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(self.probs.view())
    }
}

/// Lowest index among the maxima.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log softmax(beta * z)`, max-shifted.
pub fn log_softmax(z: ArrayView1<f64>, beta: f64) -> Array1<f64> {
    let scaled = z.mapv(|x| beta * x);
    let m = scaled.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + scaled.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    scaled.mapv(|x| x - lse)
}

/// Softmax with inverse temperature `beta`.
pub fn softmax_temp(z: ArrayView1<f64>, beta: f64) -> Result<Distribution> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", format!("{beta} is not a finite non-negative value")));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(softmax_unchecked(z, beta))
}

pub(crate) fn softmax_unchecked(z: ArrayView1<f64>, beta: f64) -> Distribution {
    let scaled = z.mapv(|x| beta * x);
    let m = scaled.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut probs = scaled.mapv(|x| (x - m).exp());
    let s = probs.sum();
    probs /= s;
    Distribution { probs }
}
