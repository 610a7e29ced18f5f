use crate::backend::Tensor;
use crate::error::{Error, Result};

/// A preprocessed model input: the normalized tensor fed to the network
/// plus the `[0, 1]` pixel-space image it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    normalized: Tensor,
    pixels: Tensor,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Per-channel `(v - mean) / std`.
pub fn normalize(pixels: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = pixels.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (mean[c], std[c]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

pub fn denormalize(normalized: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = normalized.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (mean[c], std[c]);
        plane.mapv_inplace(|v| v * s + m);
    }
    out
}

impl ImageTensor {
    pub fn from_pixels(pixels: Tensor, mean: &[f64], std: &[f64]) -> Result<Self> {
        let c = pixels.dim().0;
        if mean.len() != c || std.len() != c {
            return Err(Error::input(format!(
                "image has {c} channels but normalization has {} / {} entries",
                mean.len(),
                std.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("image contains non-finite pixels"));
        }
        Ok(Self { normalized: normalize(&pixels, mean, std), pixels, mean: mean.to_vec(), std: std.to_vec() })
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.normalized.dim()
    }

    /// `(height, width)`
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.dim();
        (h, w)
    }
}
