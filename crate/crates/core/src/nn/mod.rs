//! Architecture: declarative model configs, blocks, presets and model
//! instantiation.

pub mod blocks;
pub mod config;
pub mod model;
pub mod presets;
pub mod receptive;
pub mod segment;

pub use blocks::{gap, moex_exchange, se_forward, MoexMoments, SeBlockParams};
pub use config::{LayerKind, LayerShape, LayerSpec, ModelConfig, MoexConfig, Task};
pub use model::{build_model, ForwardPass, Init, Mode, Model, ParamRole, ParamStore};
pub use presets::{preset, preset_sized};
pub use receptive::{receptive_field, Window};
pub use segment::unet_predict_mask;

use crate::error::{Error, Result};
use crate::imageproc::{resize_values, GrayImage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stacks gray images into a `[N, 1, H, W]` batch with values in `[0, 1]`.
/// Images of another size are bilinearly resampled to `H x W`.
pub fn images_to_batch<T: Scalar>(images: &[GrayImage], input_shape: [usize; 3]) -> Result<Tensor<T>> {
    let [c, h, w] = input_shape;
    if c != 1 {
        return Err(Error::config(format!("gray images feed single-channel models, model expects {c} channels")));
    }
    if images.is_empty() {
        return Err(Error::invalid("empty image batch"));
    }
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.width(), img.height()) == (w, h) {
            data.extend(img.samples().iter().map(|&v| T::of(v as f64 / 255.0)));
        } else {
            let values: Vec<f64> = img.samples().iter().map(|&v| v as f64).collect();
            let resized = resize_values(&values, img.width(), img.height(), w, h);
            data.extend(resized.into_iter().map(|v| T::of(v / 255.0)));
        }
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}
