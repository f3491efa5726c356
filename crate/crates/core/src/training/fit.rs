//! The training loop.
//!
//! Randomness comes from independent streams derived from the run seed:
//! one per epoch for shuffling, one per (epoch, sample) for augmentation and
//! one per (epoch, batch) for moment exchange. A run resumed at an epoch
//! boundary therefore draws exactly what an uninterrupted run would.


use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::loss::{cross_entropy, moex_loss};
use super::optim::{Optimizer, OptimizerConfig};
use super::schedule::ScheduleConfig;
use crate::error::{Error, Result};
use crate::evaluation::{argmax, mean_iou};
use crate::imageproc::{clahe, rotate, ClaheParams, GrayImage, MaskImage};
use crate::nn::config::LambdaPolicy;
use crate::nn::{images_to_batch, Mode, Model, Task};
use crate::scalar::Scalar;
use crate::tensor::{graph_sigmoid, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClaheMode {
    /// Each epoch, every training image is enhanced with probability
    /// `clahe_fraction`.
    #[default]
    PerEpoch,
    /// Before training, enhanced copies of a fixed `clahe_fraction` of the
    /// training images are added to the set.
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Random rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub clahe_fraction: f64,
    pub clahe_mode: ClaheMode,
    pub clahe: ClaheParams,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotation_deg: 0.0, clahe_fraction: 0.0, clahe_mode: ClaheMode::PerEpoch, clahe: ClaheParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    /// Enables the model's `moex` layers during training.
    pub moex: bool,
    /// Foreground threshold for validation masks of segmentation models.
    pub mask_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::Constant,
            augment: AugmentConfig::default(),
            moex: false,
            mask_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.moex && self.batch_size < 2 {
            return Err(Error::config("moment exchange needs batch_size >= 2"));
        }
        let a = &self.augment;
        if !(0.0..=360.0).contains(&a.rotation_deg) {
            return Err(Error::config(format!("rotation_deg {} outside [0, 360]", a.rotation_deg)));
        }
        if !(0.0..=1.0).contains(&a.clahe_fraction) {
            return Err(Error::config(format!("clahe_fraction {} outside [0, 1]", a.clahe_fraction)));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold <= 1.0) {
            return Err(Error::config(format!("mask_threshold {} outside (0, 1]", self.mask_threshold)));
        }
        self.optimizer.validate()
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Classification accuracy, or pixel accuracy for segmentation.
    pub val_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
    /// Batches trained with moment exchange.
    #[serde(default)]
    pub moex_batches: usize,
}

/// Parameter values of the best validation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot<T> {
    pub epoch: usize,
    pub score: f64,
    /// Values of every store entry, in store order.
    pub values: Vec<Vec<T>>,
}

/// Everything needed to continue a run at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub optimizer: Optimizer<T>,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestSnapshot<T>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig, model: &Model<T>) -> Result<Self> {
        Ok(TrainState { epoch: 0, step: 0, optimizer: Optimizer::new(cfg.optimizer, model.store())?, history: Vec::new(), best: None })
    }

    /// A copy of `model` carrying the best validation parameters, or the
    /// current ones if no epoch has been validated.
    pub fn best_model(&self, model: &Model<T>) -> Model<T> {
        let mut out = model.clone();
        if let Some(b) = &self.best {
            for (i, v) in b.values.iter().enumerate() {
                out.store_mut().tensor_mut(i).data_mut().copy_from_slice(v);
            }
        }
        out
    }
}

pub type FitOutcome<T> = TrainState<T>;

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_AUGMENT: u64 = 0x4155_4720;
const TAG_MOEX: u64 = 0x4d4f_4558;
const TAG_OFFLINE: u64 = 0x4f46_464c;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, tag, a, b)`.
pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed ^ tag) ^ a) ^ b))
}

struct Item {
    sample: usize,
    offline_clahe: bool,
}

fn check_inputs<T: Scalar>(model: &Model<T>, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("training needs non-empty train and validation splits"));
    }
    let [_, h, w] = model.input_shape();
    match model.task() {
        Task::Classify => {
            if train.class_names.len() != model.num_classes() {
                return Err(Error::config(format!(
                    "model has {} classes but the data has {}",
                    model.num_classes(),
                    train.class_names.len()
                )));
            }
            for (name, count) in train.class_names.iter().zip(train.class_counts()) {
                if count == 0 {
                    return Err(Error::config(format!("class '{name}' has no training samples")));
                }
            }
        }
        Task::Segment => {
            if cfg.moex {
                return Err(Error::config("moment exchange is only defined for classification"));
            }
            for s in train.samples.iter().chain(&val.samples) {
                match &s.mask {
                    Some(m) if (m.width(), m.height()) == (w, h) => {}
                    Some(m) => {
                        return Err(Error::config(format!(
                            "mask of '{}' is {}x{}, model predicts {w}x{h}",
                            s.id,
                            m.width(),
                            m.height()
                        )))
                    }
                    None => return Err(Error::config(format!("segmentation sample '{}' has no mask", s.id))),
                }
            }
        }
    }
    if cfg.moex && !model.has_moex() {
        return Err(Error::config("moex is enabled but the model has no moex layer"));
    }
    Ok(())
}

fn rotate_mask(mask: &MaskImage, degrees: f64) -> Result<MaskImage> {
    let g = rotate(&mask.to_gray(), degrees, 0)?;
    Ok(MaskImage::from_fn(g.width(), g.height(), |x, y| g.get(x, y) >= 128))
}

/// Picks for each sample a partner in the batch, preferring a different
/// label and falling back to any other sample.
pub fn moex_partners(labels: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let cross: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
            if !cross.is_empty() {
                cross[rng.random_range(0..cross.len())]
            } else if n > 1 {
                let j = rng.random_range(0..n - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            } else {
                i
            }
        })
        .collect()
}

/// Trains `model` in place. `state` resumes an earlier run; `on_epoch` is
/// called after every epoch with the new record.
pub fn fit_with<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    state: Option<TrainState<T>>,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<T>, &TrainState<T>) -> Result<()>,
) -> Result<TrainState<T>> {
    check_inputs(model, train, val, cfg)?;
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg, model)?,
    };
    let mut items: Vec<Item> = (0..train.len()).map(|sample| Item { sample, offline_clahe: false }).collect();
    let aug = &cfg.augment;
    if aug.clahe_mode == ClaheMode::Offline && aug.clahe_fraction > 0.0 {
        let count = (aug.clahe_fraction * train.len() as f64).round() as usize;
        let mut rng = stream(cfg.seed, TAG_OFFLINE, 0, 0);
        let mut chosen = rand::seq::index::sample(&mut rng, train.len(), count).into_vec();
        chosen.sort_unstable();
        items.extend(chosen.into_iter().map(|sample| Item { sample, offline_clahe: true }));
    }
    let batches_per_epoch = items.len().div_ceil(cfg.batch_size) as u64;
    let base_lr = cfg.optimizer.lr();
    let schedule = cfg.schedule.resolve(base_lr, batches_per_epoch * cfg.epochs as u64)?;
    let moex_cfg = model.moex_config().cloned();
    let shape = model.input_shape();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut stream(cfg.seed, TAG_SHUFFLE, epoch as u64, 0));
        let mut loss_sum = 0.0;
        let mut moex_batches = 0;
        let mut epoch_lr = None;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::new();
            let mut labels = Vec::with_capacity(chunk.len());
            for &it in chunk {
                let item = &items[it];
                let sample = &train.samples[item.sample];
                let mut rng = stream(cfg.seed, TAG_AUGMENT, epoch as u64, it as u64);
                let (u_rot, u_clahe): (f64, f64) = (rng.random(), rng.random());
                let angle = (2.0 * u_rot - 1.0) * aug.rotation_deg;
                let enhance = item.offline_clahe || (aug.clahe_mode == ClaheMode::PerEpoch && u_clahe < aug.clahe_fraction);
                let mut img: GrayImage = if enhance { clahe(&sample.image, aug.clahe)? } else { sample.image.clone() };
                if angle != 0.0 {
                    img = rotate(&img, angle, 0)?;
                }
                if let Some(m) = &sample.mask {
                    masks.push(if angle != 0.0 { rotate_mask(m, angle)? } else { m.clone() });
                }
                images.push(img);
                labels.push(sample.label);
            }
            let batch: Tensor<T> = images_to_batch(&images, shape)?;
            let mut g = Graph::new();
            let x = g.input(&batch);
            let mut partner = None;
            let mut lambda = 1.0;
            if let (true, Some(m)) = (cfg.moex, &moex_cfg) {
                let mut rng = stream(cfg.seed, TAG_MOEX, epoch as u64, b as u64);
                let apply: f64 = rng.random();
                let p = moex_partners(&labels, &mut rng);
                lambda = match m.lambda {
                    LambdaPolicy::Fixed(l) => l,
                    LambdaPolicy::Beta(a) => Beta::new(a, a).map_err(|e| Error::config(e.to_string()))?.sample(&mut rng),
                };
                if apply < m.p {
                    partner = Some(p);
                }
            }
            let pass = model.forward(&mut g, x, Mode::Train, partner.as_deref())?;
            let loss = match model.task() {
                Task::Classify => match &partner {
                    Some(p) => {
                        moex_batches += 1;
                        let yb: Vec<usize> = p.iter().map(|&j| labels[j]).collect();
                        moex_loss(&mut g, pass.output, &labels, &yb, lambda)?
                    }
                    None => cross_entropy(&mut g, pass.output, &labels)?,
                },
                Task::Segment => {
                    let targets: Vec<T> =
                        masks.iter().flat_map(|m| m.samples().iter().map(|&v| T::of(v as f64))).collect();
                    g.bce_with_logits(pass.output, &targets)?
                }
            };
            let loss_value = g.value(loss)[0].to_f64_lossy();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {} batch {b}", epoch + 1)));
            }
            loss_sum += loss_value * chunk.len() as f64;
            let grads = g.backward(loss)?;
            model.store_mut().zero_grads();
            model.accumulate_gradients(&pass, &grads);
            model.update_running_stats(&pass, &g);
            let lr = schedule.map_or(base_lr, |s| s.lr(state.step));
            epoch_lr.get_or_insert(lr);
            state.optimizer.step(model.store_mut(), lr)?;
            state.step += 1;
        }
        model.store_mut().zero_grads();
        let (val_acc, val_miou) = validate(model, val, cfg.batch_size, cfg.mask_threshold)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: epoch_lr.unwrap_or(base_lr),
            train_loss: loss_sum / items.len() as f64,
            val_acc,
            val_miou,
            moex_batches,
        };
        let score = val_miou.unwrap_or(val_acc);
        if state.best.as_ref().is_none_or(|b| score > b.score) {
            let values = model.store().entries().iter().map(|e| e.tensor.data().to_vec()).collect();
            state.best = Some(BestSnapshot { epoch: epoch + 1, score, values });
        }
        state.history.push(record);
        state.epoch += 1;
        on_epoch(state.history.last().expect("just pushed"), model, &state)?;
    }
    Ok(state)
}

/// [`fit_with`] without a per-epoch callback.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    state: Option<TrainState<T>>,
) -> Result<TrainState<T>> {
    fit_with(model, train, val, cfg, state, |_, _, _| Ok(()))
}

/// Evaluation-mode model outputs for every sample, batch by batch, as a
/// flat row-major vector.
pub fn dataset_outputs<T: Scalar>(model: &Model<T>, images: &[GrayImage], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in images.chunks(batch_size.max(1)) {
        let batch: Tensor<T> = images_to_batch(chunk, model.input_shape())?;
        out.extend(model.infer(&batch)?.data().iter().map(|v| v.to_f64_lossy()));
    }
    Ok(out)
}

/// Softmax probabilities `[N, K]` for a classification model.
pub fn dataset_probabilities<T: Scalar>(model: &Model<T>, images: &[GrayImage], batch_size: usize) -> Result<Vec<f64>> {
    if model.task() != Task::Classify {
        return Err(Error::usage("class probabilities need a classification model"));
    }
    let k = model.num_classes();
    let mut logits = dataset_outputs(model, images, batch_size)?;
    for row in logits.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(logits)
}

/// Validation accuracy, plus mean IoU for segmentation models.
pub fn validate<T: Scalar>(model: &Model<T>, val: &Dataset, batch_size: usize, threshold: f64) -> Result<(f64, Option<f64>)> {
    let images = val.images();
    let outputs = dataset_outputs(model, &images, batch_size)?;
    match model.task() {
        Task::Classify => {
            let k = model.num_classes();
            let correct = outputs.chunks(k).zip(&val.samples).filter(|(row, s)| argmax(row) == s.label).count();
            Ok((correct as f64 / val.len() as f64, None))
        }
        Task::Segment => {
            let [_, h, w] = model.input_shape();
            let mut iou = 0.0;
            let mut acc = 0.0;
            for (logits, s) in outputs.chunks(h * w).zip(&val.samples) {
                let truth = s.mask.as_ref().ok_or_else(|| Error::config(format!("sample '{}' has no mask", s.id)))?;
                let pred = MaskImage::from_fn(w, h, |x, y| graph_sigmoid(logits[y * w + x]) >= threshold);
                iou += mean_iou(&pred, truth)?;
                let same = pred.samples().iter().zip(truth.samples()).filter(|(a, b)| a == b).count();
                acc += same as f64 / (w * h) as f64;
            }
            let n = val.len() as f64;
            Ok((acc / n, Some(iou / n)))
        }
    }
}
