#![allow(dead_code)]

pub mod oracle;

use gfi_core::backend::toy;
use gfi_core::backend::Tensor;
use gfi_core::ImageTensor;

pub fn oracle_net() -> oracle::ToyWeights {
    oracle::ToyWeights::parse(toy::bundled_bytes())
}

/// `[0, 1]` pixels of a single-channel image as rows.
pub fn rows(img: &ImageTensor) -> Vec<Vec<f64>> {
    let px: &Tensor = img.pixels();
    let (_, h, w) = px.dim();
    (0..h).map(|y| (0..w).map(|x| px[[0, y, x]]).collect()).collect()
}
