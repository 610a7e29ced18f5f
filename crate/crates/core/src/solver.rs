//! Two-stage mask optimization: guided feature inversion, then
//! class-discriminative fine-tuning seeded by the inversion result.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{Model, Tensor};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::mask::{build_mask, clip_nonneg, MaskBuild, MaskWeights, SaliencyMask};
use crate::objectives::{Evaluation, InversionLoss, InversionTarget, LossBreakdown, MaskProblem, TargetLoss};
use crate::perturbation::{make_baseline, BaselineKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpretConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub lr: f64,
    /// Stage-2 learning rate halves after every this many iterations; 0 disables.
    pub lr_halving_period: usize,
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub omega_init: f64,
    pub baseline: BaselineKind,
    pub seed: u64,
    /// Divide the inversion error by the feature count.
    pub mean_squared_inversion: bool,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 10,
            stage2_iters: 70,
            lr: 1e-2,
            lr_halving_period: 10,
            gamma: 10.0,
            delta: 1.0,
            lambda: 1.0,
            omega_init: 0.1,
            baseline: BaselineKind::default(),
            seed: 0,
            mean_squared_inversion: false,
        }
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, v) in
            [("gamma", self.gamma), ("delta", self.delta), ("lambda", self.lambda), ("omega_init", self.omega_init)]
        {
            if !finite_nonneg(v) {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if let BaselineKind::GaussianBlur { radius: 0 } = self.baseline {
            return Err(Error::config("blur radius must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate of stage-2 iteration `t` (1-based).
    pub fn stage2_lr(&self, t: usize) -> f64 {
        if self.lr_halving_period == 0 || t == 0 {
            return self.lr;
        }
        self.lr * 0.5f64.powi(((t - 1) / self.lr_halving_period) as i32)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// One optimizer iteration: the loss at the weights before the step and the
/// learning rate the step used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub weights: MaskWeights,
    /// Mask of the final weights.
    pub mask: MaskBuild,
    pub trace: Vec<TraceEntry>,
    /// Set if any evaluated mask, including the final one, was degenerate.
    pub degenerate: bool,
}

/// Per-image quantities that stay fixed for a whole run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: ImageTensor,
    pub acts: Tensor,
    pub target: InversionTarget,
    pub baseline: ImageTensor,
}

impl Prepared {
    pub fn new(model: &Model, image: &ImageTensor, cfg: &InterpretConfig) -> Result<Self> {
        let (acts, inv) = model.explainer_taps(image.normalized())?;
        Ok(Self {
            image: image.clone(),
            acts,
            target: InversionTarget::new(inv),
            baseline: make_baseline(&cfg.baseline, image)?,
        })
    }

    pub fn problem<'a>(&'a self, model: &'a Model) -> MaskProblem<'a> {
        MaskProblem { model, x: self.image.normalized(), acts: &self.acts, baseline: self.baseline.normalized() }
    }

    pub fn build(&self, weights: &MaskWeights) -> Result<MaskBuild> {
        build_mask(weights, &self.acts, self.image.spatial())
    }
}

fn optimize(
    stage: &'static str,
    prep: &Prepared,
    start: MaskWeights,
    iters: usize,
    lr_at: impl Fn(usize) -> f64,
    evaluate: impl Fn(&MaskWeights) -> Result<Evaluation>,
) -> Result<StageResult> {
    let mut w = start;
    let mut adam = Adam::new(w.len());
    let mut trace = Vec::with_capacity(iters);
    let mut degenerate = false;
    for t in 1..=iters {
        let eval = evaluate(&w)?;
        if !eval.loss.total.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { stage, iteration: t });
        }
        if eval.degenerate && !degenerate {
            log::warn!("{stage} iteration {t}: mask is constant before normalization");
        }
        degenerate |= eval.degenerate;
        let lr = lr_at(t);
        adam.step(w.as_mut_slice(), &eval.grad, lr);
        w = clip_nonneg(&w);
        trace.push(TraceEntry { iteration: t, lr, loss: eval.loss, degenerate: eval.degenerate });
    }
    let mask = prep.build(&w)?;
    degenerate |= mask.is_degenerate();
    Ok(StageResult { weights: w, mask, trace, degenerate })
}

/// Guided feature inversion from `omega_init` at a fixed learning rate.
pub fn run_stage1(model: &Model, prep: &Prepared, cfg: &InterpretConfig) -> Result<StageResult> {
    cfg.validate()?;
    let loss = InversionLoss {
        problem: prep.problem(model),
        target: &prep.target,
        gamma: cfg.gamma,
        mean_squared: cfg.mean_squared_inversion,
    };
    let start = MaskWeights::filled(model.layer_spec().n_channels, cfg.omega_init);
    optimize("stage 1", prep, start, cfg.stage1_iters, |_| cfg.lr, |w| loss.evaluate(w))
}

/// Class-discriminative fine-tuning from `start` with the halving schedule.
pub fn run_stage2(
    model: &Model,
    prep: &Prepared,
    class: usize,
    start: MaskWeights,
    cfg: &InterpretConfig,
) -> Result<StageResult> {
    cfg.validate()?;
    if start.as_slice().iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::input("stage-2 start weights must be finite and nonnegative"));
    }
    if class >= model.num_classes() {
        return Err(Error::input(format!("class index {class} out of range (0..{})", model.num_classes())));
    }
    let loss = TargetLoss { problem: prep.problem(model), class, lambda: cfg.lambda, delta: cfg.delta };
    optimize("stage 2", prep, start, cfg.stage2_iters, |t| cfg.stage2_lr(t), |w| loss.evaluate(w))
}

#[derive(Debug, Clone)]
pub struct ExplanationResult {
    pub mask: SaliencyMask,
    pub weights: MaskWeights,
    pub target_class: usize,
    pub predicted_class: usize,
    pub predicted_prob: f64,
    pub stage1_trace: Vec<TraceEntry>,
    pub stage2_trace: Vec<TraceEntry>,
    pub degenerate: bool,
    pub wall_time_seconds: f64,
}

/// Stage 1, then stage 2 seeded by its weights. Without `class` the top-1
/// prediction is explained.
pub fn explain(
    model: &Model,
    image: &ImageTensor,
    class: Option<usize>,
    cfg: &InterpretConfig,
) -> Result<ExplanationResult> {
    let started = Instant::now();
    cfg.validate()?;
    let scores = model.class_prob(image.normalized())?;
    let (predicted_class, predicted_prob) = scores.argmax();
    let target_class = class.unwrap_or(predicted_class);
    scores.get(target_class)?;
    let prep = Prepared::new(model, image, cfg)?;
    let s1 = run_stage1(model, &prep, cfg)?;
    let s2 = run_stage2(model, &prep, target_class, s1.weights.clone(), cfg)?;
    Ok(ExplanationResult {
        mask: SaliencyMask::from_grid(&s2.mask.mask)?,
        weights: s2.weights,
        target_class,
        predicted_class,
        predicted_prob,
        stage1_trace: s1.trace,
        stage2_trace: s2.trace,
        degenerate: s1.degenerate || s2.degenerate,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}
