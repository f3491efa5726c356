//! Receptive-field bookkeeping for chains of sliding-window layers.

use super::config::{LayerKind, ModelConfig};
use crate::error::{Error, Result};

/// A sliding-window layer: square kernel `kernel` moved by `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: u64,
    pub stride: u64,
}

impl Window {
    pub fn new(kernel: u64, stride: u64) -> Self {
        Window { kernel, stride }
    }
}

/// Receptive field after every layer of `chain`, starting from a single
/// pixel: `rf_n = rf_{n-1} k_n - (k_n - 1)(rf_{n-1} - prod_{i<n} s_i)`.
pub fn receptive_field(chain: &[Window]) -> Result<Vec<u64>> {
    let mut rf: i128 = 1;
    let mut jump: i128 = 1;
    let mut out = Vec::with_capacity(chain.len());
    for (i, w) in chain.iter().enumerate() {
        if w.kernel == 0 || w.stride == 0 {
            return Err(Error::config(format!("layer {i}: kernel and stride must be at least 1")));
        }
        let k = w.kernel as i128;
        rf = rf * k - (k - 1) * (rf - jump);
        jump *= w.stride as i128;
        let v = u64::try_from(rf).map_err(|_| Error::Numeric(format!("receptive field overflows at layer {i}")))?;
        if jump > u64::MAX as i128 {
            return Err(Error::Numeric(format!("stride product overflows at layer {i}")));
        }
        out.push(v);
    }
    Ok(out)
}

/// Windows along the main path of a model: convolutions, pools and the two
/// 3x3 convolutions inside each residual or dense layer.
pub fn window_chain(cfg: &ModelConfig) -> Vec<(String, Window)> {
    let names = cfg.layer_names();
    let mut chain = Vec::new();
    for (name, layer) in names.into_iter().zip(&cfg.layers) {
        match &layer.kind {
            LayerKind::Conv(p) => chain.push((name, Window::new(p.kernel as u64, p.stride as u64))),
            LayerKind::Pool(p) => chain.push((name, Window::new(p.size as u64, p.size as u64))),
            LayerKind::ResidualBlock(p) => {
                chain.push((format!("{name}.conv1"), Window::new(3, p.stride as u64)));
                chain.push((format!("{name}.conv2"), Window::new(3, 1)));
            }
            LayerKind::DenseBlock(p) => {
                for j in 0..p.layers {
                    chain.push((format!("{name}.{j}.conv"), Window::new(3, 1)));
                }
            }
            _ => {}
        }
    }
    chain
}
