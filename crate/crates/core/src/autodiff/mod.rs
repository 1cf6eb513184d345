//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the operations the supernet and child networks need are provided:
//! grouped convolution, ReLU, channel shuffle, pooling, a linear layer,
//! softmax cross-entropy, plus the mask and cost primitives used by the
//! architecture search.

mod conv;
mod graph;
mod tensor;

pub use conv::{conv_output_len, ConvGeometry};
pub use graph::{shuffle_permutation, Graph, Var};
pub use tensor::Tensor;

use crate::{Error, Result};

/// `softmax((logits + noise) / tau)` restricted to the finite logits. Cells
/// whose logit is non-finite get exactly zero weight.
pub fn masked_gumbel_softmax(logits: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if logits.len() != noise.len() {
        return Err(Error::shape(format!(
            "{} logits against {} noise values",
            logits.len(),
            noise.len()
        )));
    }
    let scaled: Vec<Option<f64>> = logits
        .iter()
        .zip(noise)
        .map(|(&z, &g)| z.is_finite().then(|| (z + g) / tau))
        .collect();
    let max = scaled
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("no admissible cell in row"));
    }
    let exps: Vec<f64> = scaled
        .iter()
        .map(|s| s.map_or(0.0, |v| (v - max).exp()))
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
