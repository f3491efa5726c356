//! Stand-alone forms of the architecture blocks, evaluated eagerly on
//! tensors. Models use the same graph ops internally.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, MoexLayout, MoexNorm, Tensor};

use super::model::se_gate;

/// Per-channel spatial mean, `[N, C, H, W] -> [N, C]`.
pub fn gap<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.input(&features.clone().with_requires_grad(false));
    let y = g.gap(x)?;
    Ok(g.tensor(y))
}

/// Squeeze-excitation weights.
#[derive(Debug, Clone)]
pub struct SeBlockParams<T> {
    pub reduction: usize,
    /// `[C, C/r]`
    pub w1: Tensor<T>,
    /// `[C/r, C]`
    pub w2: Tensor<T>,
}

impl<T: Scalar> SeBlockParams<T> {
    pub fn new(channels: usize, reduction: usize, w1: Tensor<T>, w2: Tensor<T>) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!("{channels} channels not divisible by reduction {reduction}")));
        }
        let hidden = channels / reduction;
        if w1.shape() != [channels, hidden] || w2.shape() != [hidden, channels] {
            return Err(Error::config(format!(
                "SE weights must be [{channels}, {hidden}] and [{hidden}, {channels}], got {:?} and {:?}",
                w1.shape(),
                w2.shape()
            )));
        }
        Ok(SeBlockParams { reduction, w1, w2 })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!("{channels} channels not divisible by reduction {reduction}")));
        }
        let hidden = channels / reduction;
        Self::new(channels, reduction, Tensor::zeros(&[channels, hidden]), Tensor::zeros(&[hidden, channels]))
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[0]
    }
}

/// Channel gating `x_c * sigmoid(W2 relu(W1 gap(x)))_c`.
pub fn se_forward<T: Scalar>(features: &Tensor<T>, params: &SeBlockParams<T>) -> Result<Tensor<T>> {
    let shape = features.shape();
    if shape.len() != 4 || shape[1] != params.channels() {
        return Err(Error::config(format!(
            "SE block expects [N, {}, H, W] features, got {shape:?}",
            params.channels()
        )));
    }
    let mut g = Graph::new();
    let x = g.input(&features.clone().with_requires_grad(false));
    let w1 = g.input(&params.w1.clone().with_requires_grad(false));
    let w2 = g.input(&params.w2.clone().with_requires_grad(false));
    let y = se_gate(&mut g, x, w1, w2)?;
    Ok(g.tensor(y))
}

/// Per-group moments of both operands of an exchange. Groups are
/// `(sample, position)` for positional norm and `(sample, channel)` for
/// instance norm; `std` includes the epsilon stabilizer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoexMoments<T> {
    pub mean_a: Vec<T>,
    pub std_a: Vec<T>,
    pub mean_b: Vec<T>,
    pub std_b: Vec<T>,
}

/// Normalizes `h_a` with its own moments and re-scales it with the moments
/// of `h_b`, sample by sample.
pub fn moex_exchange<T: Scalar>(
    h_a: &Tensor<T>,
    h_b: &Tensor<T>,
    norm: MoexNorm,
    eps: T,
) -> Result<(Tensor<T>, MoexMoments<T>)> {
    if h_a.shape() != h_b.shape() || h_a.shape().len() != 4 {
        return Err(Error::invalid(format!(
            "moment exchange needs two equal NCHW shapes, got {:?} and {:?}",
            h_a.shape(),
            h_b.shape()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::config("moex epsilon must be positive"));
    }
    let s = h_a.shape();
    let n = s[0];
    let layout = MoexLayout { norm, n, c: s[1], hw: s[2] * s[3], partner: (0..n).collect() };
    let (mean_a, std_a, xhat) = layout.normalize(h_a.data(), eps);
    let (mean_b, std_b, _) = layout.normalize(h_b.data(), eps);
    let mut out = vec![T::zero(); xhat.len()];
    for g in 0..layout.groups() {
        for j in 0..layout.group_size() {
            let e = layout.element(g, j);
            out[e] = xhat[e] * std_b[g] + mean_b[g];
        }
    }
    Ok((Tensor::new(s, out)?, MoexMoments { mean_a, std_a, mean_b, std_b }))
}
