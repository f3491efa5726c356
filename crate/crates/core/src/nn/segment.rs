//! Mask prediction with segmentation models and mask clean-up.

use std::collections::VecDeque;

use super::config::Task;
use super::model::Model;
use super::images_to_batch;
use crate::error::{Error, Result};
use crate::imageproc::{GrayImage, MaskImage};
use crate::scalar::Scalar;
use crate::tensor::graph_sigmoid;

/// Foreground probability per pixel, at the model's input resolution.
pub fn unet_probabilities<T: Scalar>(model: &Model<T>, img: &GrayImage) -> Result<Vec<f64>> {
    if model.task() != Task::Segment {
        return Err(Error::usage("mask prediction needs a segmentation model"));
    }
    let batch = images_to_batch::<T>(std::slice::from_ref(img), model.input_shape())?;
    let logits = model.infer(&batch)?;
    Ok(logits.data().iter().map(|&z| graph_sigmoid(z).to_f64_lossy()).collect())
}

/// Thresholds `sigmoid(logits)`; a probability equal to the threshold counts
/// as foreground. With `postprocess`, only the two largest 4-connected
/// components survive and their holes are filled. The mask is resampled to
/// the image size when the model input differs.
pub fn unet_predict_mask<T: Scalar>(model: &Model<T>, img: &GrayImage, threshold: f64, postprocess: bool) -> Result<MaskImage> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config(format!("mask threshold {threshold} outside (0, 1]")));
    }
    let probs = unet_probabilities(model, img)?;
    let [_, h, w] = model.input_shape();
    let mut mask = MaskImage::from_fn(w, h, |x, y| probs[y * w + x] >= threshold);
    if postprocess {
        mask = fill_holes(&keep_largest_components(&mask, 2));
    }
    if (w, h) != (img.width(), img.height()) {
        let (iw, ih) = (img.width(), img.height());
        mask = MaskImage::from_fn(iw, ih, |x, y| {
            let sx = ((x as f64 + 0.5) * w as f64 / iw as f64).floor() as usize;
            let sy = ((y as f64 + 0.5) * h as f64 / ih as f64).floor() as usize;
            mask.get(sx.min(w - 1), sy.min(h - 1))
        });
    }
    Ok(mask)
}

/// Labels 4-connected regions where `inside` holds; returns per-pixel labels
/// (0 = outside) and each label's size, in scan order of first pixel.
fn label_regions(width: usize, height: usize, inside: impl Fn(usize) -> bool) -> (Vec<usize>, Vec<usize>) {
    let mut labels = vec![0usize; width * height];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..width * height {
        if labels[start] != 0 || !inside(start) {
            continue;
        }
        sizes.push(0);
        let id = sizes.len();
        labels[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            sizes[id - 1] += 1;
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if labels[q] == 0 && inside(q) {
                    labels[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
    }
    (labels, sizes)
}

/// Keeps the `keep` largest 4-connected foreground components. Ties in size
/// go to the component found first in scan order.
pub fn keep_largest_components(mask: &MaskImage, keep: usize) -> MaskImage {
    let (w, h) = (mask.width(), mask.height());
    let s = mask.samples();
    let (labels, sizes) = label_regions(w, h, |p| s[p] != 0);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut kept = vec![false; sizes.len() + 1];
    for &i in order.iter().take(keep) {
        kept[i + 1] = true;
    }
    MaskImage::from_fn(w, h, |x, y| kept[labels[y * w + x]])
}

/// Sets every background region that does not touch the border.
pub fn fill_holes(mask: &MaskImage) -> MaskImage {
    let (w, h) = (mask.width(), mask.height());
    let s = mask.samples();
    let (labels, sizes) = label_regions(w, h, |p| s[p] == 0);
    let mut border = vec![false; sizes.len() + 1];
    for x in 0..w {
        border[labels[x]] = true;
        border[labels[(h - 1) * w + x]] = true;
    }
    for y in 0..h {
        border[labels[y * w]] = true;
        border[labels[y * w + w - 1]] = true;
    }
    MaskImage::from_fn(w, h, |x, y| {
        let p = y * w + x;
        s[p] != 0 || !border[labels[p]]
    })
}
