//! The two mask objectives as differentiable functions of the channel
//! weights: feature inversion with an l1 penalty, and the class-discriminative
//! foreground/background objective.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{Model, Objective, Tensor};
use crate::error::{Error, Result};
use crate::mask::{build_mask, MaskBuild, MaskWeights};
use crate::perturbation::{compose_background, compose_foreground, foreground_mask_grad};

pub const INVERSION_ERROR: &str = "inversion_error";
pub const FG_ACTIVATION: &str = "fg_activation";
pub const BG_ACTIVATION: &str = "bg_activation";
pub const L1_PENALTY: &str = "l1_penalty";

/// Named loss terms, their weights, and the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossBreakdown {
    fn from_terms(terms: &[(&str, f64, f64)]) -> Self {
        let mut components = BTreeMap::new();
        let mut weights = BTreeMap::new();
        let mut total = 0.0;
        for &(name, value, weight) in terms {
            components.insert(name.to_string(), value);
            weights.insert(name.to_string(), weight);
            total += weight * value;
        }
        Self { total, components, weights }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    /// `sum weight * value`, recomputed from the parts.
    pub fn weighted_sum(&self) -> f64 {
        self.components.iter().map(|(k, v)| v * self.weights.get(k).copied().unwrap_or(0.0)).sum()
    }
}

pub fn l1_norm(weights: &MaskWeights) -> f64 {
    weights.as_slice().iter().map(|w| w.abs()).sum()
}

/// Subgradient of `l1_norm`, zero at zero.
fn l1_grad(weights: &MaskWeights) -> impl Iterator<Item = f64> + '_ {
    weights.as_slice().iter().map(|&w| {
        if w > 0.0 {
            1.0
        } else if w < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Detached features of the original input at the inversion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTarget {
    features: Tensor,
}

impl InversionTarget {
    pub fn new(features: Tensor) -> Self {
        Self { features }
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// What both objectives share: the model, the normalized input, its
/// base-layer channels, and the baseline it is blended against.
#[derive(Clone, Copy)]
pub struct MaskProblem<'a> {
    pub model: &'a Model,
    pub x: &'a Tensor,
    pub acts: &'a Tensor,
    pub baseline: &'a Tensor,
}

impl MaskProblem<'_> {
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.x.dim();
        (h, w)
    }

    pub fn build(&self, weights: &MaskWeights) -> Result<MaskBuild> {
        build_mask(weights, self.acts, self.spatial())
    }
}

/// One objective evaluation: the loss terms, the mask they were computed on,
/// and the weight gradient. At a degenerate (constant) mask only the penalty
/// term contributes to `grad` and `degenerate` is set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub mask: MaskBuild,
    pub grad: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Copy)]
pub struct InversionLoss<'a> {
    pub problem: MaskProblem<'a>,
    pub target: &'a InversionTarget,
    pub gamma: f64,
    /// Divide the squared error by the feature count.
    pub mean_squared: bool,
}

impl InversionLoss<'_> {
    fn scale(&self) -> f64 {
        if self.mean_squared {
            1.0 / self.target.len() as f64
        } else {
            1.0
        }
    }

    /// Squared feature error of the composite for an explicit mask, with
    /// the gradient with respect to that mask.
    pub fn error_for_mask(&self, mask: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let p = &self.problem;
        let phi = compose_foreground(p.x, mask, p.baseline)?;
        let trace = p.model.trace_inversion(&phi)?;
        if trace.output().dim() != self.target.features().dim() {
            return Err(Error::input("inversion target shape does not match the inversion layer"));
        }
        let diff = trace.output() - self.target.features();
        let err = diff.iter().map(|d| d * d).sum::<f64>() * self.scale();
        let grad_phi = p.model.backward(&trace, &(diff * (2.0 * self.scale())))?;
        Ok((err, foreground_mask_grad(p.x, p.baseline, &grad_phi)))
    }

    pub fn evaluate(&self, weights: &MaskWeights) -> Result<Evaluation> {
        let built = self.problem.build(weights)?;
        let (err, grad_mask) = self.error_for_mask(&built.mask)?;
        let loss =
            LossBreakdown::from_terms(&[(INVERSION_ERROR, err, 1.0), (L1_PENALTY, l1_norm(weights), self.gamma)]);
        finish(loss, built, &grad_mask, self.problem.acts, weights, self.gamma)
    }
}

impl Objective for InversionLoss<'_> {
    fn value_and_grad(&self, weights: &MaskWeights) -> Result<(f64, Vec<f64>)> {
        strict(self.evaluate(weights)?)
    }
}

#[derive(Clone, Copy)]
pub struct TargetLoss<'a> {
    pub problem: MaskProblem<'a>,
    pub class: usize,
    pub lambda: f64,
    pub delta: f64,
}

impl TargetLoss<'_> {
    /// `(f_c(fg), f_c(bg))` for an explicit mask, plus the gradient of
    /// `-f_c(fg) + lambda f_c(bg)` with respect to that mask.
    pub fn scores_for_mask(&self, mask: &Array2<f64>) -> Result<(f64, f64, Array2<f64>)> {
        let p = &self.problem;
        if self.class >= p.model.num_classes() {
            return Err(Error::input(format!(
                "class index {} out of range (0..{})",
                self.class,
                p.model.num_classes()
            )));
        }
        let fg = compose_foreground(p.x, mask, p.baseline)?;
        let bg = compose_background(p.x, mask, p.baseline)?;
        let (s_fg, g_fg) = p.model.class_prob_with_grad(&fg, self.class)?;
        let (s_bg, g_bg) = p.model.class_prob_with_grad(&bg, self.class)?;
        // the background composite moves opposite to the mask
        let combined = g_fg * -1.0 - g_bg * self.lambda;
        Ok((s_fg.get(self.class)?, s_bg.get(self.class)?, foreground_mask_grad(p.x, p.baseline, &combined)))
    }

    pub fn evaluate(&self, weights: &MaskWeights) -> Result<Evaluation> {
        let built = self.problem.build(weights)?;
        let (fg, bg, grad_mask) = self.scores_for_mask(&built.mask)?;
        let loss = LossBreakdown::from_terms(&[
            (FG_ACTIVATION, fg, -1.0),
            (BG_ACTIVATION, bg, self.lambda),
            (L1_PENALTY, l1_norm(weights), self.delta),
        ]);
        finish(loss, built, &grad_mask, self.problem.acts, weights, self.delta)
    }
}

impl Objective for TargetLoss<'_> {
    fn value_and_grad(&self, weights: &MaskWeights) -> Result<(f64, Vec<f64>)> {
        strict(self.evaluate(weights)?)
    }
}

fn finish(
    loss: LossBreakdown,
    built: MaskBuild,
    grad_mask: &Array2<f64>,
    acts: &Tensor,
    weights: &MaskWeights,
    penalty: f64,
) -> Result<Evaluation> {
    let degenerate = built.is_degenerate();
    let mut grad = if degenerate { vec![0.0; weights.len()] } else { built.backward(grad_mask, acts)? };
    for (g, s) in grad.iter_mut().zip(l1_grad(weights)) {
        *g += penalty * s;
    }
    Ok(Evaluation { loss, mask: built, grad, degenerate })
}

/// The gradient contract refuses degenerate points instead of reporting the
/// penalty-only subgradient.
fn strict(eval: Evaluation) -> Result<(f64, Vec<f64>)> {
    if eval.degenerate {
        return Err(Error::NotDifferentiable("mask is constant before normalization".into()));
    }
    Ok((eval.loss.total, eval.grad))
}
