//! Grad-CAM saliency, heatmap overlays and region-mass audits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::{resize_values, GrayImage, Rect, RgbImage};
use crate::nn::{LayerShape, Mode, Model, Task};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Non-negative saliency values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::invalid(format!("{} values for a {width}x{height} heatmap", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("heatmap values must lie in [0, 1]"));
        }
        Ok(Heatmap { width, height, values })
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `round(255 v)` per pixel.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| (self.get(x, y) * 255.0).round() as u8)
    }
}

/// Grad-CAM output: the map at feature resolution, the map at input
/// resolution and the channel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCam {
    pub layer: String,
    pub feature_map: Heatmap,
    pub heatmap: Heatmap,
    /// Spatial mean of the class-score gradient, per channel.
    pub alphas: Vec<f64>,
}

fn normalize_by_max(values: &mut [f64]) {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Grad-CAM for one image `[1, C, H, W]` and a target class. The class
/// score is the pre-softmax logit. `layer` defaults to the last spatial
/// layer before the pooling head.
pub fn grad_cam<T: Scalar>(model: &Model<T>, input: &Tensor<T>, class: usize, layer: Option<&str>) -> Result<GradCam> {
    if model.task() != Task::Classify {
        return Err(Error::usage("Grad-CAM needs a classification model"));
    }
    if class >= model.num_classes() {
        return Err(Error::usage(format!("class {class} out of range for {} classes", model.num_classes())));
    }
    if input.shape().len() != 4 || input.shape()[0] != 1 {
        return Err(Error::invalid(format!("Grad-CAM takes a single image [1, C, H, W], got {:?}", input.shape())));
    }
    let layer = match layer {
        Some(l) => l.to_string(),
        None => model.default_feature_layer()?,
    };
    let idx = model.layer_index(&layer)?;
    let (c, fh, fw) = match model.layer_shapes()[idx] {
        LayerShape::Spatial { c, h, w } => (c, h, w),
        LayerShape::Flat(_) => return Err(Error::usage(format!("layer '{layer}' has no spatial activations"))),
    };
    let mut g = Graph::new();
    let x = g.input(&input.clone().with_requires_grad(true));
    let pass = model.forward(&mut g, x, Mode::Eval, None)?;
    let k = model.num_classes();
    let mut pick = vec![T::zero(); k];
    pick[class] = T::one();
    let sel = g.leaf(&[1, k], pick, false);
    let masked = g.mul(pass.output, sel)?;
    let score = g.sum(masked);
    let grads = g.backward(score)?;
    let a_var = pass.layer_outputs[idx];
    let acts: Vec<f64> = g.value(a_var).iter().map(|v| v.to_f64_lossy()).collect();
    let hw = fh * fw;
    let grad: Vec<f64> = match grads.get(a_var) {
        Some(gr) => gr.iter().map(|v| v.to_f64_lossy()).collect(),
        None => vec![0.0; acts.len()],
    };
    let alphas: Vec<f64> = grad.chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
    let mut raw = vec![0.0; hw];
    for ch in 0..c {
        let a = alphas[ch];
        if a != 0.0 {
            for (r, &v) in raw.iter_mut().zip(&acts[ch * hw..(ch + 1) * hw]) {
                *r += a * v;
            }
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    normalize_by_max(&mut raw);
    let [_, _, ih, iw] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let mut up = resize_values(&raw, fw, fh, iw, ih);
    up.iter_mut().for_each(|v| *v = v.max(0.0));
    normalize_by_max(&mut up);
    Ok(GradCam {
        layer,
        feature_map: Heatmap { width: fw, height: fh, values: raw },
        heatmap: Heatmap { width: iw, height: ih, values: up },
        alphas,
    })
}

/// Anchors of the heatmap colormap: blue, cyan, green, yellow, red at
/// 0, 0.25, 0.5, 0.75 and 1.
pub const JET_ANCHORS: [[f64; 3]; 5] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Piecewise-linear colormap over [`JET_ANCHORS`]; input clamped to `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0) * 4.0;
    let i = (v.floor() as usize).min(3);
    let t = v - i as f64;
    let (a, b) = (JET_ANCHORS[i], JET_ANCHORS[i + 1]);
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// `round((1 - alpha) gray + alpha jet(h))` per channel. The heatmap is
/// resampled to the image size if needed.
pub fn overlay(img: &GrayImage, hm: &Heatmap, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    let (w, h) = (img.width(), img.height());
    let values = if (hm.width, hm.height) == (w, h) {
        hm.values.clone()
    } else {
        resize_values(&hm.values, hm.width, hm.height, w, h)
    };
    let mut samples = Vec::with_capacity(w * h * 3);
    for (&gv, &hv) in img.samples().iter().zip(&values) {
        let color = jet(hv);
        for c in color {
            samples.push(((1.0 - alpha) * gv as f64 + alpha * c).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage { width: w, height: h, samples })
}

/// Share of the heatmap's total mass inside `region`; 0 for a zero map.
pub fn region_mass(hm: &Heatmap, region: Rect) -> Result<f64> {
    if region.area() == 0 {
        return Err(Error::invalid("region is empty"));
    }
    if !region.fits(hm.width, hm.height) {
        return Err(Error::invalid(format!("region {region:?} exceeds the {}x{} heatmap", hm.width, hm.height)));
    }
    let total: f64 = hm.values.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut inside = 0.0;
    for y in region.y..region.y + region.height {
        for x in region.x..region.x + region.width {
            inside += hm.get(x, y);
        }
    }
    Ok(inside / total)
}

/// Region-mass audit entry as stored in metrics files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAudit {
    pub image: String,
    pub class: usize,
    pub layer: String,
    pub region: Rect,
    pub mass: f64,
}
