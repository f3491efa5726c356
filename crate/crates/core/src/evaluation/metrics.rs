//! Classification and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::MaskImage;

/// `K x K` counts; row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for n in &self.class_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|i| i.to_string()).collect()
}

pub fn confusion(preds: &[usize], truths: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= k || t >= k {
            return Err(Error::invalid(format!("label {} out of range for {k} classes", p.max(t))));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { class_names: default_names(k), counts })
}

/// Trace over total; errors on an empty matrix.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.k()).map(|i| cm.counts[i][i]).sum();
    Ok(trace as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// `None` for a class that never occurs in predictions or truths.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes that occur.
    pub macro_f1: f64,
}

/// Per-class F1. A class present somewhere with zero precision and recall
/// scores 0; a class absent from both predictions and truths is left out
/// of the macro mean.
pub fn f1(cm: &ConfusionMatrix) -> F1Scores {
    let k = cm.k();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.counts[c][c] as f64;
        let actual: u64 = cm.counts[c].iter().sum();
        let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
        if actual == 0 && predicted == 0 {
            per_class.push(None);
            continue;
        }
        let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
        per_class.push(Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 }));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_f1 = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    F1Scores { per_class, macro_f1 }
}

/// Threshold-sweep ROC points from `(0, 0)` to `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub positive_class: usize,
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,fpr,tpr\n");
        for (f, t) in &self.points {
            out.push_str(&format!("{},{f},{t}\n", self.positive_class));
        }
        out
    }
}

/// ROC curve and trapezoid AUC for binary truths. Scores are swept from
/// high to low, one point per distinct score; the area is accumulated in
/// integer counts so it equals the pair statistic
/// `P(s+ > s-) + P(s+ = s-) / 2` exactly.
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<(RocCurve, f64)> {
    if scores.len() != truths.len() {
        return Err(Error::invalid(format!("{} scores for {} truths", scores.len(), truths.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = truths.iter().filter(|&&t| t).count() as u128;
    let neg = truths.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut twice_area = 0u128;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = twice_area as f64 / (2 * pos * neg) as f64;
    Ok((RocCurve { positive_class: 1, points }, auc))
}

/// Probabilities in row-major `[N, K]` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvrAuc {
    pub per_class: Vec<f64>,
    pub macro_auc: f64,
    pub curves: Vec<RocCurve>,
}

/// One-vs-rest AUC per class and their unweighted mean.
pub fn macro_ovr_auc(probs: &[f64], k: usize, truths: &[usize]) -> Result<OvrAuc> {
    if k < 2 {
        return Err(Error::invalid("one-vs-rest AUC needs at least two classes"));
    }
    if probs.len() != truths.len() * k {
        return Err(Error::invalid(format!("expected {} probabilities, got {}", truths.len() * k, probs.len())));
    }
    if let Some(&t) = truths.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("label {t} out of range for {k} classes")));
    }
    let missing: Vec<String> = (0..k).filter(|c| !truths.contains(c)).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::UndefinedMetric(format!("classes absent from truths: {}", missing.join(", "))));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut curves = Vec::with_capacity(k);
    for c in 0..k {
        let scores: Vec<f64> = probs.chunks(k).map(|row| row[c]).collect();
        let bin: Vec<bool> = truths.iter().map(|&t| t == c).collect();
        let (mut curve, auc) = roc_auc(&scores, &bin)?;
        curve.positive_class = c;
        per_class.push(auc);
        curves.push(curve);
    }
    let macro_auc = per_class.iter().sum::<f64>() / k as f64;
    Ok(OvrAuc { per_class, macro_auc, curves })
}

/// Mean of foreground and background IoU; a class absent from both masks
/// scores 1.
pub fn mean_iou(pred: &MaskImage, truth: &MaskImage) -> Result<f64> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut inter = [0u64; 2];
    let mut union = [0u64; 2];
    for (&p, &t) in pred.samples().iter().zip(truth.samples()) {
        for (cls, on) in [(0usize, 0u8), (1, 1)] {
            let (a, b) = (p == on, t == on);
            inter[cls] += (a && b) as u64;
            union[cls] += (a || b) as u64;
        }
    }
    let iou = |c: usize| if union[c] == 0 { 1.0 } else { inter[c] as f64 / union[c] as f64 };
    Ok((iou(0) + iou(1)) / 2.0)
}

/// Everything reported for a classification evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub macro_f1: f64,
    /// Absent when some class has no test sample.
    pub per_class_auc: Option<Vec<f64>>,
    pub macro_auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    #[serde(skip)]
    pub roc: Vec<RocCurve>,
}

impl MetricsReport {
    /// Builds the report from `[N, K]` probabilities; predictions are the
    /// row argmax (first maximum on ties).
    pub fn from_probabilities(probs: &[f64], k: usize, truths: &[usize], class_names: &[String]) -> Result<Self> {
        if probs.len() != truths.len() * k {
            return Err(Error::invalid(format!("expected {} probabilities, got {}", truths.len() * k, probs.len())));
        }
        let preds: Vec<usize> = probs.chunks(k).map(argmax).collect();
        let mut cm = confusion(&preds, truths, k)?;
        if class_names.len() == k {
            cm.class_names = class_names.to_vec();
        }
        let acc = accuracy(&cm)?;
        let f = f1(&cm);
        let (per_class_auc, macro_auc, roc) = match macro_ovr_auc(probs, k, truths) {
            Ok(o) => (Some(o.per_class), Some(o.macro_auc), o.curves),
            Err(Error::UndefinedMetric(_)) => (None, None, Vec::new()),
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            samples: truths.len(),
            accuracy: acc,
            per_class_f1: f.per_class,
            macro_f1: f.macro_f1,
            per_class_auc,
            macro_auc,
            confusion: cm,
            roc,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// All one-vs-rest ROC points as `class,fpr,tpr` rows.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("class,fpr,tpr\n");
        for c in &self.roc {
            out.push_str(c.to_csv().split_once('\n').map(|(_, rest)| rest).unwrap_or(""));
        }
        out
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
