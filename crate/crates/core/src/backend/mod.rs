//! Adapter around a differentiable CNN: tapped activations, class
//! probabilities, and input gradients of scalar objectives.

pub mod arch;
pub mod layers;
pub mod network;
pub mod registry;
pub mod toy;
pub mod weights;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use layers::Tensor;
pub use network::{Network, Trace};
pub use registry::{ArchEntry, Registry};

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::mask::{minmax_normalize, MaskWeights, SaliencyMask};

/// Which taps the explainer uses on a given model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Layer whose features the guided inversion matches.
    pub inversion_layer: String,
    /// Layer whose channels compose the mask.
    pub base_channel_layer: String,
    pub n_channels: usize,
    pub base_spatial: (usize, usize),
}

/// Feature maps captured during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSnapshot {
    layers: BTreeMap<String, Tensor>,
    detached: bool,
}

impl ActivationSnapshot {
    pub fn get(&self, layer: &str) -> Option<&Tensor> {
        self.layers.get(layer)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Snapshots are owned copies; nothing computed later can write to them
    /// or route gradients into them.
    pub fn is_detached(&self) -> bool {
        self.detached
    }

    pub fn into_layer(mut self, layer: &str) -> Option<Tensor> {
        self.layers.remove(layer)
    }
}

/// Softmax probabilities over all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores(Vec<f64>);

impl ClassScores {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self(softmax(logits))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> Result<f64> {
        self.0
            .get(class)
            .copied()
            .ok_or_else(|| Error::input(format!("class index {class} out of range (0..{})", self.0.len())))
    }

    /// Highest-probability class; ties go to the lower index.
    pub fn argmax(&self) -> (usize, f64) {
        self.0
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best })
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A scalar function of the mask weights that can report its own gradient.
pub trait Objective {
    fn value_and_grad(&self, weights: &MaskWeights) -> Result<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: Fn(&MaskWeights) -> Result<(f64, Vec<f64>)>,
{
    fn value_and_grad(&self, weights: &MaskWeights) -> Result<(f64, Vec<f64>)> {
        self(weights)
    }
}

/// Gradient of `objective` with respect to the mask weights.
///
/// A gradient of the wrong length or with non-finite entries is reported as
/// an error rather than passed on.
pub fn grad_of(objective: &(impl Objective + ?Sized), wrt: &MaskWeights) -> Result<Vec<f64>> {
    let (_, grad) = objective.value_and_grad(wrt)?;
    if grad.len() != wrt.len() {
        return Err(Error::NotDifferentiable(format!("gradient has {} entries for {} weights", grad.len(), wrt.len())));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NotDifferentiable("gradient has non-finite entries".into()));
    }
    Ok(grad)
}

/// A loaded network together with its registry entry and resolved taps.
#[derive(Debug, Clone)]
pub struct Model {
    entry: ArchEntry,
    network: Network,
    spec: LayerSpec,
    inversion_idx: usize,
    base_idx: usize,
}

impl Model {
    /// Wraps `network`, checking that the entry's taps exist and produce the
    /// declared channel count and spatial size.
    pub fn new(entry: ArchEntry, network: Network) -> Result<Self> {
        let inversion_idx = network.resolve(&entry.inversion_layer)?;
        let base_idx = network.resolve(&entry.base_channel_layer)?;
        let shapes = network.output_shapes(entry.input_shape())?;
        let (c, h, w) = shapes[base_idx].1;
        if c != entry.n_channels || [h, w] != entry.base_spatial {
            return Err(Error::config(format!(
                "layer '{}' of '{}' produces {c}x{h}x{w}, registry declares {}x{}x{}",
                entry.base_channel_layer, entry.name, entry.n_channels, entry.base_spatial[0], entry.base_spatial[1]
            )));
        }
        let out = shapes.last().map(|(_, d)| *d).unwrap_or(entry.input_shape());
        if out != (entry.num_classes, 1, 1) {
            return Err(Error::config(format!(
                "'{}' ends in {out:?}, expected {} class logits",
                entry.name, entry.num_classes
            )));
        }
        let spec = LayerSpec {
            inversion_layer: entry.inversion_layer.clone(),
            base_channel_layer: entry.base_channel_layer.clone(),
            n_channels: c,
            base_spatial: (h, w),
        };
        Ok(Self { entry, network, spec, inversion_idx, base_idx })
    }

    /// Builds the registry entry's graph and fills it from a safetensors file.
    /// The path `builtin` selects the bundled weights of entries that have them.
    pub fn load(entry: &ArchEntry, weights_path: &Path) -> Result<Self> {
        let mut net = arch::build(&entry.builder, entry.num_classes)?;
        // an explicit path overrides the bundled checkpoint
        if entry.weights == "builtin" && weights_path.as_os_str() == "builtin" {
            toy::load_bundled(&mut net)?;
        } else {
            weights::load(&mut net, weights_path)?;
        }
        Self::new(entry.clone(), net)
    }

    /// The bundled fixed-seed test network.
    pub fn toy() -> Self {
        toy::model()
    }

    /// Same network with different taps; channel count and base size are
    /// re-derived from the graph.
    pub fn with_layers(mut self, inversion_layer: &str, base_channel_layer: &str) -> Result<Self> {
        let shapes = self.network.output_shapes(self.entry.input_shape())?;
        let base_idx = self.network.resolve(base_channel_layer)?;
        let (c, h, w) = shapes[base_idx].1;
        self.entry.inversion_layer = inversion_layer.to_string();
        self.entry.base_channel_layer = base_channel_layer.to_string();
        self.entry.n_channels = c;
        self.entry.base_spatial = [h, w];
        Self::new(self.entry, self.network)
    }

    pub fn entry(&self) -> &ArchEntry {
        &self.entry
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn layer_spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.entry.num_classes
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dim() != self.entry.input_shape() {
            return Err(Error::input(format!(
                "model '{}' expects input {:?}, got {:?}",
                self.entry.name,
                self.entry.input_shape(),
                x.dim()
            )));
        }
        Ok(())
    }

    /// Activations of the requested layers for one inference pass.
    pub fn forward_with_taps(&self, x: &Tensor, layers: &[&str]) -> Result<ActivationSnapshot> {
        self.check_input(x)?;
        let idx = layers.iter().map(|l| self.network.resolve(l)).collect::<Result<Vec<_>>>()?;
        let mut collected = self.network.forward_collect(x, &idx)?;
        let layers = layers
            .iter()
            .zip(&idx)
            .map(|(name, i)| (name.to_string(), collected.get(i).cloned().expect("collected")))
            .collect();
        collected.clear();
        Ok(ActivationSnapshot { layers, detached: true })
    }

    /// Channels of the base layer for `x`, shape `(n_channels, h, w)`.
    pub fn base_activations(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut out = self.network.forward_collect(x, &[self.base_idx])?;
        Ok(out.remove(&self.base_idx).expect("collected"))
    }

    /// Base-layer and inversion-layer activations of one pass.
    pub fn explainer_taps(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut out = self.network.forward_collect(x, &[self.base_idx, self.inversion_idx])?;
        let base = out.remove(&self.base_idx).expect("collected");
        let inv = out.remove(&self.inversion_idx).unwrap_or_else(|| base.clone());
        Ok((base, inv))
    }

    /// Forward pass up to the inversion layer, kept for `backward`.
    pub fn trace_inversion(&self, x: &Tensor) -> Result<Trace> {
        self.check_input(x)?;
        self.network.trace(x, Some(self.inversion_idx), &[])
    }

    /// Forward pass through the classifier head, kept for `backward`.
    pub fn trace_logits(&self, x: &Tensor) -> Result<Trace> {
        self.check_input(x)?;
        self.network.trace(x, None, &[])
    }

    pub fn backward(&self, trace: &Trace, grad_out: &Tensor) -> Result<Tensor> {
        self.network.backward(trace, grad_out)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.network.forward(x)?.iter().copied().collect())
    }

    pub fn class_prob(&self, x: &Tensor) -> Result<ClassScores> {
        Ok(ClassScores::from_logits(&self.logits(x)?))
    }

    /// Gradient with respect to `x` of a scalar function of the logits;
    /// `head` returns the value and its gradient over the logits.
    pub fn grad_through_logits<F>(&self, x: &Tensor, head: F) -> Result<(f64, Tensor)>
    where
        F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let trace = self.trace_logits(x)?;
        let logits: Vec<f64> = trace.output().iter().copied().collect();
        let (value, g) = head(&logits)?;
        let g = Tensor::from_shape_vec((g.len(), 1, 1), g).map_err(|e| Error::input(e.to_string()))?;
        Ok((value, self.backward(&trace, &g)?))
    }

    /// `(f_c(x), d f_c / d x)` with `f_c` the softmax probability of `class`.
    pub fn class_prob_with_grad(&self, x: &Tensor, class: usize) -> Result<(ClassScores, Tensor)> {
        let mut scores = None;
        let (_, grad) = self.grad_through_logits(x, |logits| {
            let s = ClassScores::from_logits(logits);
            let pc = s.get(class)?;
            let g = s
                .probs()
                .iter()
                .enumerate()
                .map(|(j, &pj)| if j == class { pc * (1.0 - pj) } else { -pc * pj })
                .collect();
            scores = Some(s);
            Ok((pc, g))
        })?;
        Ok((scores.expect("head ran"), grad))
    }

    /// Cross-entropy of the softmax against `class`, with its input gradient.
    pub fn cross_entropy_with_grad(&self, x: &Tensor, class: usize) -> Result<(f64, Tensor)> {
        self.grad_through_logits(x, |logits| {
            let s = ClassScores::from_logits(logits);
            let pc = s.get(class)?;
            let g = s.probs().iter().enumerate().map(|(j, &pj)| if j == class { pj - 1.0 } else { pj }).collect();
            Ok((-pc.ln(), g))
        })
    }
}

/// Gradient-magnitude saliency: `max_c |d score_class / d pixel|`, min-max
/// normalized. The score is the pre-softmax logit; the derivative is taken
/// in `[0, 1]` pixel space.
pub fn vanilla_gradient_saliency(model: &Model, x: &ImageTensor, class: usize) -> Result<SaliencyMask> {
    if class >= model.num_classes() {
        return Err(Error::input(format!("class index {class} out of range (0..{})", model.num_classes())));
    }
    let (_, grad) = model.grad_through_logits(x.normalized(), |logits| {
        let mut g = vec![0.0; logits.len()];
        g[class] = 1.0;
        Ok((logits[class], g))
    })?;
    let (c, h, w) = grad.dim();
    let mut map = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        let inv_std = 1.0 / x.std()[ci];
        for ((y, xx), v) in map.indexed_iter_mut() {
            *v = v.max((grad[[ci, y, xx]] * inv_std).abs());
        }
    }
    let (norm, _) = minmax_normalize(&map)?;
    SaliencyMask::from_grid(&norm)
}
