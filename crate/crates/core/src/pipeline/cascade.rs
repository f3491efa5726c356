//! Two-stage cascade: infection-type triage, then viral subtyping for
//! images the first stage calls viral.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::{apply_mask, GrayImage};
use crate::nn::{images_to_batch, unet_predict_mask, Model, Task};
use crate::training::load_checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    /// Segmentation checkpoint; when set, stage 2 sees lung-masked input.
    #[serde(default)]
    pub mask_model: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub mask_threshold: f64,
    /// Stage-1 label that triggers stage 2.
    #[serde(default = "default_route")]
    pub route_label: String,
}

fn default_threshold() -> f64 {
    0.5
}

fn default_route() -> String {
    "viral".into()
}

/// A classifier together with its class table.
#[derive(Debug, Clone)]
pub struct Stage {
    pub model: Model<f32>,
    pub class_names: Vec<String>,
}

impl Stage {
    pub fn new(model: Model<f32>, class_names: Vec<String>) -> Result<Self> {
        if model.task() != Task::Classify || model.num_classes() != class_names.len() {
            return Err(Error::config(format!(
                "stage classifier has {} outputs but {} class names",
                model.num_classes(),
                class_names.len()
            )));
        }
        Ok(Stage { model, class_names })
    }

    pub fn probabilities(&self, img: &GrayImage) -> Result<Vec<f64>> {
        let batch = images_to_batch::<f32>(std::slice::from_ref(img), self.model.input_shape())?;
        Ok(self.model.predict_proba(&batch)?.data().iter().map(|&v| v as f64).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Cascade {
    pub stage1: Stage,
    pub stage2: Stage,
    pub mask_model: Option<Model<f32>>,
    pub mask_threshold: f64,
    pub route_label: String,
    route_index: usize,
}

impl Cascade {
    pub fn new(stage1: Stage, stage2: Stage, mask_model: Option<Model<f32>>, mask_threshold: f64, route_label: &str) -> Result<Self> {
        let route_index = stage1
            .class_names
            .iter()
            .position(|c| c == route_label)
            .ok_or_else(|| Error::config(format!("stage 1 has no '{route_label}' class to route on")))?;
        if let Some(c) = stage2.class_names.iter().find(|c| stage1.class_names.contains(c)) {
            return Err(Error::config(format!("class '{c}' appears in both stages")));
        }
        if let Some(m) = &mask_model {
            if m.task() != Task::Segment {
                return Err(Error::config("mask model must be a segmentation model"));
            }
        }
        Ok(Cascade { stage1, stage2, mask_model, mask_threshold, route_label: route_label.to_string(), route_index })
    }

    pub fn load(cfg: &CascadeConfig) -> Result<Self> {
        let stage = |p: &PathBuf| -> Result<Stage> {
            let ck = load_checkpoint(p)?;
            Stage::new(ck.best_model()?, ck.class_names.clone())
        };
        let mask_model = match &cfg.mask_model {
            Some(p) => Some(load_checkpoint(p)?.best_model()?),
            None => None,
        };
        Cascade::new(stage(&cfg.stage1)?, stage(&cfg.stage2)?, mask_model, cfg.mask_threshold, &cfg.route_label)
    }

    /// Final labels in report order: stage-1 labels other than the routing
    /// label, then the stage-2 labels.
    pub fn leaf_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self.stage1.class_names.iter().filter(|c| **c != self.route_label).cloned().collect();
        out.extend(self.stage2.class_names.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadeStep {
    Stage1,
    Mask,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub final_label: String,
    pub stage1: Vec<f64>,
    pub stage2: Option<Vec<f64>>,
    /// Leaf probabilities, with viral leaves as `stage1[route] * stage2`;
    /// present only when stage 2 ran.
    pub leaf_probabilities: Option<Vec<(String, f64)>>,
    /// Steps executed, in order.
    pub log: Vec<CascadeStep>,
}

/// Classifies `img` with stage 1 and, when its argmax is the routing
/// label, with stage 2.
pub fn cascade_predict(cascade: &Cascade, img: &GrayImage) -> Result<CascadeResult> {
    let mut log = vec![CascadeStep::Stage1];
    let p1 = cascade.stage1.probabilities(img)?;
    let top1 = crate::evaluation::argmax(&p1);
    if top1 != cascade.route_index {
        return Ok(CascadeResult {
            final_label: cascade.stage1.class_names[top1].clone(),
            stage1: p1,
            stage2: None,
            leaf_probabilities: None,
            log,
        });
    }
    let input = match &cascade.mask_model {
        Some(m) => {
            log.push(CascadeStep::Mask);
            let mask = unet_predict_mask(m, img, cascade.mask_threshold, true)?;
            apply_mask(img, &mask)?
        }
        None => img.clone(),
    };
    log.push(CascadeStep::Stage2);
    let p2 = cascade.stage2.probabilities(&input)?;
    let top2 = crate::evaluation::argmax(&p2);
    let mut leaves: Vec<(String, f64)> = cascade
        .stage1
        .class_names
        .iter()
        .zip(&p1)
        .filter(|(c, _)| **c != cascade.route_label)
        .map(|(c, &p)| (c.clone(), p))
        .collect();
    let routed = p1[cascade.route_index];
    leaves.extend(cascade.stage2.class_names.iter().zip(&p2).map(|(c, &p)| (c.clone(), routed * p)));
    Ok(CascadeResult {
        final_label: cascade.stage2.class_names[top2].clone(),
        stage1: p1,
        stage2: Some(p2),
        leaf_probabilities: Some(leaves),
        log,
    })
}
