//! Fixed-seed toy CNN and synthetic scenes for tests and demos.
//!
//! The bundled checkpoint `assets/toy_cnn.safetensors` is exactly
//! `generate(TOY_SEED)`; regenerate it with
//! `cargo run -p gfi-core --example export_toy_weights`.

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::network::{Network, ParamsMut};
use super::registry::Registry;
use super::{arch, weights, Model, Tensor};
use crate::error::Result;
use crate::image_tensor::ImageTensor;

pub const TOY_SEED: u64 = 20_180_521;
pub const TOY_CLASSES: usize = 3;

const BUNDLED: &[u8] = include_bytes!("../../assets/toy_cnn.safetensors");

/// He-initialized toy weights with small positive biases so most units are
/// active on typical inputs.
pub fn generate(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = arch::toy(TOY_CLASSES);
    net.visit_params_mut(&mut |_, p| {
        match p {
            ParamsMut::Conv(c) => {
                let (o, i, kh, kw) = c.weight.dim();
                let normal = Normal::new(0.0, (2.0 / (i * kh * kw) as f64).sqrt()).expect("valid std");
                c.weight = Array4::from_shape_simple_fn((o, i, kh, kw), || normal.sample(&mut rng));
                c.bias = Array1::from_shape_simple_fn(o, || rng.random_range(0.0..0.1));
            }
            ParamsMut::Linear(l) => {
                let (o, i) = l.weight.dim();
                let normal = Normal::new(0.0, (1.0 / i as f64).sqrt()).expect("valid std");
                l.weight = Array2::from_shape_simple_fn((o, i), || normal.sample(&mut rng));
                l.bias = Array1::zeros(o);
            }
            ParamsMut::BatchNorm(_) => {}
        }
        Ok(())
    })
    .expect("toy init cannot fail");
    net
}

pub(crate) fn load_bundled(net: &mut Network) -> Result<()> {
    weights::load_from_bytes(net, BUNDLED)
}

pub(crate) fn model() -> Model {
    let entry = Registry::builtin().get("toy").expect("toy registered").clone();
    let mut net = arch::toy(entry.num_classes);
    load_bundled(&mut net).expect("bundled toy weights are valid");
    Model::new(entry, net).expect("toy model is consistent")
}

/// Raw bytes of the bundled checkpoint.
pub fn bundled_bytes() -> &'static [u8] {
    BUNDLED
}

/// An 8x8 single-channel scene: dim textured background with one bright
/// 3x3 square whose position depends on `seed`.
pub fn scene(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (oy, ox) = (rng.random_range(0..6usize), rng.random_range(0..6usize));
    let mut px = Tensor::zeros((1, 8, 8));
    for y in 0..8 {
        for x in 0..8 {
            let inside = (oy..oy + 3).contains(&y) && (ox..ox + 3).contains(&x);
            px[[0, y, x]] = if inside { rng.random_range(0.8..1.0) } else { rng.random_range(0.05..0.35) };
        }
    }
    ImageTensor::from_pixels(px, &[0.5], &[0.25]).expect("toy scene is valid")
}
