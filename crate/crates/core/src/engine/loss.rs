//! Softmax and cross-entropy restricted to a subset of logit indices.

use crate::array::Scalar;
use crate::error::{Error, Result};

/// Softmax over `logits[subset]`, returned in subset order.
pub fn softmax<T: Scalar>(logits: &[T], subset: &[usize]) -> Result<Vec<T>> {
    if subset.is_empty() {
        return Err(Error::config("softmax over an empty index subset"));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= logits.len()) {
        return Err(Error::config(format!(
            "softmax index {bad} outside logit vector of length {}",
            logits.len()
        )));
    }
    let max = subset
        .iter()
        .map(|&i| logits[i])
        .fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = subset.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Cross-entropy of `target` under the softmax over `subset`.
///
/// The gradient has the full logit length and is exactly zero outside the
/// subset.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &[T],
    target: usize,
    subset: &[usize],
) -> Result<(T, Vec<T>)> {
    let pos = subset.iter().position(|&i| i == target).ok_or_else(|| {
        Error::usage(format!(
            "target class {target} is not in the loss subset {subset:?}"
        ))
    })?;
    let probs = softmax(logits, subset)?;
    let max = subset
        .iter()
        .map(|&i| logits[i])
        .fold(T::neg_infinity(), T::max);
    let log_sum = subset
        .iter()
        .map(|&i| (logits[i] - max).exp())
        .sum::<T>()
        .ln()
        + max;
    let loss = log_sum - logits[target];
    let mut grad = vec![T::zero(); logits.len()];
    for (k, (&i, &p)) in subset.iter().zip(&probs).enumerate() {
        grad[i] = if k == pos { p - T::one() } else { p };
    }
    Ok((loss, grad))
}
