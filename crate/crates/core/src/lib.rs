//! Saliency masks for CNN classifiers from guided feature inversion.
//!
//! A mask is a nonnegative weighted sum of high-layer channel activations,
//! min-max normalized and upsampled to the input. The weights are fitted in
//! two stages: first so that the masked image keeps the original's features
//! at a late pooling layer, then so that the masked image keeps the target
//! class while the complementary background loses it.

pub mod backend;
pub mod error;
pub mod evaluation;
pub mod image_tensor;
pub mod io;
pub mod mask;
pub mod objectives;
pub mod perturbation;
pub mod solver;

pub use backend::{ClassScores, LayerSpec, Model, Objective, Registry};
pub use error::{Error, Result};
pub use image_tensor::ImageTensor;
pub use mask::{MaskWeights, SaliencyMask};
pub use perturbation::BaselineKind;
pub use solver::{explain, ExplanationResult, InterpretConfig};
