//! Reusable training and evaluation recipes, including the architecture
//! ablation.

use serde::{Deserialize, Serialize};

use super::synthetic::{swap_token, TokenSpec};
use crate::error::{Error, Result};
use crate::evaluation::{argmax, mean_iou, MetricsReport};
use crate::explain::{grad_cam, region_mass};
use crate::imageproc::{apply_mask, GrayImage};
use crate::nn::presets::{staged, Head, StagedOptions};
use crate::nn::{build_model, images_to_batch, unet_predict_mask, Init, Model, ModelConfig};
use crate::training::fit::{dataset_probabilities, fit};
use crate::training::{Dataset, OptimizerConfig, TrainConfig, TrainState};

/// Builds and trains a classifier; returns the best-validation model and
/// the final training state.
pub fn train_model(cfg: &ModelConfig, train: &Dataset, val: &Dataset, tc: &TrainConfig) -> Result<(Model<f32>, TrainState<f32>)> {
    let mut model = build_model::<f32>(cfg, Init::HeUniform, tc.seed)?;
    let state = fit(&mut model, train, val, tc, None)?;
    Ok((state.best_model(&model), state))
}

/// Metrics of a classifier on `data`.
pub fn evaluate_classifier(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let probs = dataset_probabilities(model, &data.images(), batch_size)?;
    MetricsReport::from_probabilities(&probs, model.num_classes(), &data.labels(), &data.class_names)
}

/// Mean IoU of predicted masks against the stored ground truth.
pub fn segmentation_iou(model: &Model<f32>, data: &Dataset, threshold: f64, postprocess: bool) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("no images to score"));
    }
    let mut total = 0.0;
    for s in &data.samples {
        let truth = s.mask.as_ref().ok_or_else(|| Error::config(format!("sample '{}' has no mask", s.id)))?;
        total += mean_iou(&unet_predict_mask(model, &s.image, threshold, postprocess)?, truth)?;
    }
    Ok(total / data.len() as f64)
}

/// Every image multiplied by its predicted lung mask.
pub fn mask_dataset(data: &Dataset, mask_model: &Model<f32>, threshold: f64) -> Result<Dataset> {
    data.map_images(|s| apply_mask(&s.image, &unet_predict_mask(mask_model, &s.image, threshold, true)?))
}

/// How much a classifier depends on the corner token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAudit {
    pub accuracy: f64,
    /// Accuracy after giving every image the token of the next class.
    pub swapped_accuracy: f64,
    /// Mean Grad-CAM mass inside the token region, for the predicted class.
    pub token_mass: f64,
}

/// Audits `model` on `data` with Grad-CAM at `layer` (default: the last
/// convolutional layer). With a mask model, each image, original or
/// token-swapped, is lung-masked before classification.
pub fn token_audit(
    model: &Model<f32>,
    data: &Dataset,
    token: &TokenSpec,
    mask_model: Option<(&Model<f32>, f64)>,
    layer: Option<&str>,
) -> Result<TokenAudit> {
    if data.is_empty() {
        return Err(Error::config("no images to audit"));
    }
    let k = model.num_classes();
    let prep = |img: &GrayImage| -> Result<GrayImage> {
        match mask_model {
            Some((m, thr)) => apply_mask(img, &unet_predict_mask(m, img, thr, true)?),
            None => Ok(img.clone()),
        }
    };
    let (mut correct, mut swapped_correct, mut mass) = (0usize, 0usize, 0.0);
    for s in &data.samples {
        let img = prep(&s.image)?;
        let batch = images_to_batch::<f32>(std::slice::from_ref(&img), model.input_shape())?;
        let probs: Vec<f64> = model.predict_proba(&batch)?.data().iter().map(|&v| v as f64).collect();
        let pred = argmax(&probs);
        correct += usize::from(pred == s.label);
        let cam = grad_cam(model, &batch, pred, layer)?;
        mass += region_mass(&cam.heatmap, token.rect())?;
        let swapped = prep(&swap_token(&s.image, token, (s.label + 1) % k))?;
        let batch = images_to_batch::<f32>(std::slice::from_ref(&swapped), model.input_shape())?;
        let probs: Vec<f64> = model.predict_proba(&batch)?.data().iter().map(|&v| v as f64).collect();
        swapped_correct += usize::from(argmax(&probs) == s.label);
    }
    let n = data.len() as f64;
    Ok(TokenAudit { accuracy: correct as f64 / n, swapped_accuracy: swapped_correct as f64 / n, token_mass: mass / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Input side of the base model; the other variants use twice this.
    pub base_size: usize,
    pub train: TrainConfig,
    /// Fraction of training images CLAHE-enhanced per epoch in the last variant.
    pub clahe_fraction: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            base_size: 32,
            train: TrainConfig { epochs: 10, optimizer: OptimizerConfig::Sgd { lr: 0.05, momentum: 0.9 }, ..TrainConfig::default() },
            clahe_fraction: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub input_size: usize,
    pub parameters: usize,
    pub test_accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: Option<f64>,
    pub best_epoch: usize,
}

/// Trains and tests the four cumulative variants: plain flatten head,
/// GAP head at twice the input, plus SE, plus SE with MoEx and CLAHE.
pub fn run_ablation(train: &Dataset, val: &Dataset, test: &Dataset, cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    let k = train.class_names.len();
    let big = cfg.base_size * 2;
    let plain = |size, head| StagedOptions { size, head, ..StagedOptions::plain(k) };
    let variants = [
        ("base", staged(&plain(cfg.base_size, Head::Flatten))?, false, 0.0),
        ("+gap-2x", staged(&plain(big, Head::Gap))?, false, 0.0),
        ("+se", staged(&StagedOptions { size: big, moex: None, ..StagedOptions::seme(k) })?, false, 0.0),
        ("+se+moex+clahe", staged(&StagedOptions { size: big, ..StagedOptions::seme(k) })?, true, cfg.clahe_fraction),
    ];
    let mut rows = Vec::new();
    for (name, mc, moex, clahe) in variants {
        let mut tc = cfg.train.clone();
        tc.moex = moex;
        tc.augment.clahe_fraction = clahe;
        let (model, state) = train_model(&mc, train, val, &tc)?;
        let report = evaluate_classifier(&model, test, tc.batch_size)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            input_size: mc.input_shape[1],
            parameters: model.store().trainable_count(),
            test_accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            macro_auc: report.macro_auc,
            best_epoch: state.best.as_ref().map_or(0, |b| b.epoch),
        });
    }
    Ok(rows)
}
