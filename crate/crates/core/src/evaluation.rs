//! Saliency evaluation: mean-threshold binarization, box localization with
//! IOU, the pointing game, salient-object metrics, and FGSM inputs.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::backend::{Model, Tensor};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::mask::SaliencyMask;

/// Pixel box with inclusive bounds, in the model-input frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::input(format!("inverted box ({x_min}, {y_min}, {x_max}, {y_max})")));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }

    /// Whether pixel `(row, col)` lies inside.
    pub fn contains(&self, (y, x): (usize, usize)) -> bool {
        (self.y_min..=self.y_max).contains(&y) && (self.x_min..=self.x_max).contains(&x)
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min && self.y_min <= other.y_min && self.x_max >= other.x_max && self.y_max >= other.y_max
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let b = BoundingBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        };
        (b.x_min <= b.x_max && b.y_min <= b.y_max).then_some(b)
    }

    pub fn fits(&self, (h, w): (usize, usize)) -> bool {
        self.x_max < w && self.y_max < h
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Pixels strictly above `alpha` times the mean saliency.
pub fn binarize(s: &SaliencyMask, alpha: f64) -> Array2<bool> {
    binarize_grid(&s.to_f64(), alpha)
}

pub fn binarize_grid(s: &Array2<f64>, alpha: f64) -> Array2<bool> {
    let threshold = alpha * s.mean().unwrap_or(0.0);
    s.mapv(|v| v > threshold)
}

/// Smallest box covering every set pixel.
pub fn tightest_bbox(mask: &Array2<bool>) -> Option<BoundingBox> {
    let mut b: Option<BoundingBox> = None;
    for ((y, x), &on) in mask.indexed_iter() {
        if !on {
            continue;
        }
        b = Some(match b {
            None => BoundingBox { x_min: x, y_min: y, x_max: x, y_max: y },
            Some(b) => BoundingBox {
                x_min: b.x_min.min(x),
                y_min: b.y_min.min(y),
                x_max: b.x_max.max(x),
                y_max: b.y_max.max(y),
            },
        });
    }
    b
}

/// The threshold multipliers 0.0, 0.5, ..., 10.0.
pub fn alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub alphas: Vec<f64>,
    pub iou_success_threshold: f64,
    pub beta_sq: f64,
    pub fgsm_epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alpha: 1.1, alphas: alpha_grid(), iou_success_threshold: 0.5, beta_sq: 0.3, fgsm_epsilon: 8.0 / 255.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.iter().chain([&self.alpha]).any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::config("alpha must be finite and nonnegative"));
        }
        if !(self.iou_success_threshold > 0.0 && self.iou_success_threshold <= 1.0) {
            return Err(Error::config("IOU success threshold must be in (0, 1]"));
        }
        if !(self.beta_sq > 0.0 && self.beta_sq.is_finite()) {
            return Err(Error::config("beta^2 must be positive"));
        }
        if !(self.fgsm_epsilon >= 0.0 && self.fgsm_epsilon.is_finite()) {
            return Err(Error::config("FGSM epsilon must be nonnegative"));
        }
        Ok(())
    }
}

/// One explained image with the ground-truth boxes of the explained class.
#[derive(Debug, Clone)]
pub struct LocalizationSample {
    pub image_id: String,
    pub mask: SaliencyMask,
    pub gt: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationOutcome {
    pub predicted: Option<BoundingBox>,
    pub best_iou: f64,
    pub success: bool,
}

/// Binarize, box, and score against the best-matching ground-truth box.
/// Success needs IOU strictly above `threshold`; an empty box fails.
pub fn localize(mask: &SaliencyMask, gt: &[BoundingBox], alpha: f64, threshold: f64) -> LocalizationOutcome {
    let predicted = tightest_bbox(&binarize(mask, alpha));
    let best_iou = predicted.map_or(0.0, |p| gt.iter().map(|g| iou(&p, g)).fold(0.0, f64::max));
    LocalizationOutcome { predicted, best_iou, success: predicted.is_some() && best_iou > threshold }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub error: f64,
    pub n_images: usize,
    pub n_skipped: usize,
}

/// Fraction of failed localizations at one `alpha`. Samples without a
/// ground-truth box are skipped and counted.
pub fn localization_error(samples: &[LocalizationSample], alpha: f64, threshold: f64) -> SweepPoint {
    let mut failures = 0;
    let mut n = 0;
    let mut skipped = 0;
    for s in samples {
        if s.gt.is_empty() {
            log::warn!("{}: no ground-truth box for the explained class; skipped", s.image_id);
            skipped += 1;
            continue;
        }
        n += 1;
        if !localize(&s.mask, &s.gt, alpha, threshold).success {
            failures += 1;
        }
    }
    let error = if n == 0 { 1.0 } else { failures as f64 / n as f64 };
    SweepPoint { alpha, error, n_images: n, n_skipped: skipped }
}

/// Error at every alpha; the best point is the first with the lowest error.
pub fn localization_sweep(
    samples: &[LocalizationSample],
    alphas: &[f64],
    threshold: f64,
) -> (Vec<SweepPoint>, Option<SweepPoint>) {
    let points: Vec<SweepPoint> = alphas.iter().map(|&a| localization_error(samples, a, threshold)).collect();
    let best = points
        .iter()
        .fold(None::<&SweepPoint>, |best, p| match best {
            Some(b) if b.error <= p.error => Some(b),
            _ => Some(p),
        })
        .cloned();
    (points, best)
}

/// One (image, class) pair of the pointing game.
#[derive(Debug, Clone)]
pub struct PointingTrial {
    pub image_id: String,
    pub class: usize,
    /// `(row, col)` of the maximum saliency.
    pub point: (usize, usize),
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HitCount {
    pub hits: usize,
    pub misses: usize,
}

impl HitCount {
    pub fn accuracy(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointingReport {
    pub per_class: BTreeMap<usize, HitCount>,
    /// Unweighted mean of the per-class accuracies.
    pub mean_accuracy: f64,
    pub n_skipped: usize,
}

pub fn pointing_hit(point: (usize, usize), boxes: &[BoundingBox]) -> bool {
    boxes.iter().any(|b| b.contains(point))
}

/// Pairs whose class has no box in the image are skipped.
pub fn pointing_game(trials: &[PointingTrial]) -> PointingReport {
    let mut per_class: BTreeMap<usize, HitCount> = BTreeMap::new();
    let mut skipped = 0;
    for t in trials {
        if t.boxes.is_empty() {
            skipped += 1;
            continue;
        }
        let c = per_class.entry(t.class).or_default();
        if pointing_hit(t.point, &t.boxes) {
            c.hits += 1;
        } else {
            c.misses += 1;
        }
    }
    let mean_accuracy = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(HitCount::accuracy).sum::<f64>() / per_class.len() as f64
    };
    PointingReport { per_class, mean_accuracy, n_skipped: skipped }
}

/// Central pixel `(floor(h/2), floor(w/2))`.
pub fn center_baseline((h, w): (usize, usize)) -> (usize, usize) {
    (h / 2, w / 2)
}

/// Salient-object binarization: strictly above twice the mean.
pub fn salient_binarize(s: &SaliencyMask) -> Array2<bool> {
    binarize(s, 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        return 0.0;
    }
    (1.0 + beta_sq) * precision * recall / denom
}

/// Precision is 0 without predicted positives; an empty ground truth is an
/// input error.
pub fn precision_recall_f(pred: &Array2<bool>, gt: &Array2<bool>, beta_sq: f64) -> Result<PrecisionRecall> {
    if pred.dim() != gt.dim() {
        return Err(Error::input(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    Zip::from(pred).and(gt).for_each(|&p, &g| match (p, g) {
        (true, true) => tp += 1,
        (true, false) => fp += 1,
        (false, true) => fneg += 1,
        _ => {}
    });
    if tp + fneg == 0 {
        return Err(Error::input("ground-truth mask is empty"));
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + fneg) as f64;
    Ok(PrecisionRecall { precision, recall, f_beta: f_beta(precision, recall, beta_sq) })
}

/// Mean absolute difference between a saliency map and a `[0, 1]` label map.
pub fn mae_metric(s: &SaliencyMask, label: &Array2<f64>) -> Result<f64> {
    if s.dim() != label.dim() {
        return Err(Error::input(format!("saliency {:?} and label {:?} differ in shape", s.dim(), label.dim())));
    }
    if label.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::input("label values must be within [0, 1]"));
    }
    let total: f64 = Zip::from(s.values()).and(label).fold(0.0, |acc, &a, &b| acc + (a as f64 - b).abs());
    Ok(total / label.len() as f64)
}

/// One signed-gradient step of size `epsilon` in pixel space that increases
/// the cross-entropy against `class`, clipped to `[0, 1]`.
pub fn fgsm_attack(model: &Model, x: &ImageTensor, class: usize, epsilon: f64) -> Result<ImageTensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::input("FGSM epsilon must be nonnegative"));
    }
    let (_, grad) = model.cross_entropy_with_grad(x.normalized(), class)?;
    // d/d pixel = d/d normalized / std; std > 0 keeps the sign
    let mut adv = Tensor::zeros(x.dim());
    Zip::from(&mut adv).and(x.pixels()).and(&grad).for_each(|a, &p, &g| {
        let step = if g > 0.0 {
            epsilon
        } else if g < 0.0 {
            -epsilon
        } else {
            0.0
        };
        *a = (p + step).clamp(0.0, 1.0);
    });
    ImageTensor::from_pixels(adv, x.mean(), x.std())
}

/// Per-image row of a metric report; fields absent for a protocol are null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image_id: String,
    pub class: Option<usize>,
    pub alpha: Option<f64>,
    pub iou: Option<f64>,
    pub hit: Option<bool>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_beta: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub summary: BTreeMap<String, f64>,
}
