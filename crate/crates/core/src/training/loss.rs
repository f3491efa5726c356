//! Loss helpers on top of the graph ops.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// One-hot rows for `labels` over `k` classes.
pub fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        out[i * k + y] = T::one();
    }
    Ok(out)
}

/// Mean cross-entropy of `[N, K]` logits against hard labels.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = logits_classes(g, logits, labels.len())?;
    let targets = one_hot(labels, k)?;
    g.softmax_cross_entropy(logits, &targets)
}

/// `lambda CE(logits, y_a) + (1 - lambda) CE(logits, y_b)`.
pub fn moex_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, y_a: &[usize], y_b: &[usize], lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("moex lambda {lambda} outside [0, 1]")));
    }
    if y_a.len() != y_b.len() {
        return Err(Error::invalid("moex label lists differ in length"));
    }
    let la = cross_entropy(g, logits, y_a)?;
    let lb = cross_entropy(g, logits, y_b)?;
    let la = g.scale(la, T::of(lambda));
    let lb = g.scale(lb, T::of(1.0 - lambda));
    g.add(la, lb)
}

fn logits_classes<T: Scalar>(g: &Graph<T>, logits: Var, n: usize) -> Result<usize> {
    match *g.shape(logits) {
        [rows, k] if rows == n => Ok(k),
        ref s => Err(Error::invalid(format!("expected [{n}, K] logits, got {s:?}"))),
    }
}
