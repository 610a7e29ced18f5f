//! Baseline images and the foreground/background composites.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backend::Tensor;
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;

pub const DEFAULT_BLUR_RADIUS: usize = 11;

/// Blur sigma per pixel of radius.
const SIGMA_PER_RADIUS: f64 = 1.0 / 2.2;

const NOISE_MEAN: f64 = 0.5;
const NOISE_STD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Constant image at the dataset mean color.
    GrayMean,
    /// Seeded white noise, clipped to the pixel range.
    GaussianNoise { seed: u64 },
    /// The input blurred with a normalized Gaussian kernel.
    GaussianBlur { radius: usize },
}

impl Default for BaselineKind {
    fn default() -> Self {
        BaselineKind::GaussianBlur { radius: DEFAULT_BLUR_RADIUS }
    }
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::GrayMean => "gray",
            BaselineKind::GaussianNoise { .. } => "noise",
            BaselineKind::GaussianBlur { .. } => "blur",
        }
    }
}

/// Uninformative background blended against the input; same shape and
/// normalization as the image it was built for.
pub type BaselineImage = ImageTensor;

/// 1-D Gaussian weights over `-radius..=radius`, summing to one.
pub fn gaussian_kernel(radius: usize) -> Array1<f64> {
    let sigma = radius as f64 * SIGMA_PER_RADIUS;
    let r = radius as isize;
    let mut k = Array1::from_iter((-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()));
    let sum = k.sum();
    k /= sum;
    k
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let j = i.rem_euclid(period);
    if j < n as isize {
        j as usize
    } else {
        (period - j) as usize
    }
}

fn convolve_axis(plane: &Array2<f64>, kernel: &Array1<f64>, axis: Axis) -> Array2<f64> {
    let r = (kernel.len() / 2) as isize;
    let n = plane.len_of(axis);
    let mut out = Array2::zeros(plane.dim());
    for ((y, x), v) in out.indexed_iter_mut() {
        let pos = if axis == Axis(0) { y } else { x } as isize;
        let mut acc = 0.0;
        for (k, &wk) in kernel.iter().enumerate() {
            let src = reflect(pos + k as isize - r, n);
            acc += wk * if axis == Axis(0) { plane[[src, x]] } else { plane[[y, src]] };
        }
        *v = acc;
    }
    out
}

/// Separable Gaussian blur of every channel, reflecting at the borders.
pub fn gaussian_blur(pixels: &Tensor, radius: usize) -> Result<Tensor> {
    if radius < 1 {
        return Err(Error::config("blur radius must be at least 1"));
    }
    let kernel = gaussian_kernel(radius);
    let mut out = Tensor::zeros(pixels.dim());
    for (src, mut dst) in pixels.outer_iter().zip(out.outer_iter_mut()) {
        let rows = convolve_axis(&src.to_owned(), &kernel, Axis(0));
        dst.assign(&convolve_axis(&rows, &kernel, Axis(1)));
    }
    Ok(out)
}

pub fn make_baseline(kind: &BaselineKind, x: &ImageTensor) -> Result<BaselineImage> {
    let dim = x.dim();
    let pixels = match *kind {
        BaselineKind::GrayMean => {
            let mut px = Tensor::zeros(dim);
            for (mut plane, &m) in px.outer_iter_mut().zip(x.mean()) {
                plane.fill(m);
            }
            px
        }
        BaselineKind::GaussianNoise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(NOISE_MEAN, NOISE_STD).expect("valid std");
            Tensor::from_shape_simple_fn(dim, || normal.sample(&mut rng).clamp(0.0, 1.0))
        }
        BaselineKind::GaussianBlur { radius } => gaussian_blur(x.pixels(), radius)?,
    };
    ImageTensor::from_pixels(pixels, x.mean(), x.std())
}

fn check_aligned(x: &Tensor, m: &Array2<f64>, p: &Tensor) -> Result<()> {
    let (_, h, w) = x.dim();
    if p.dim() != x.dim() || m.dim() != (h, w) {
        return Err(Error::input(format!(
            "composite needs aligned inputs: image {:?}, mask {:?}, baseline {:?}",
            x.dim(),
            m.dim(),
            p.dim()
        )));
    }
    Ok(())
}

/// `x * m + p * (1 - m)` with `m` broadcast over channels.
pub fn compose_foreground(x: &Tensor, m: &Array2<f64>, p: &Tensor) -> Result<Tensor> {
    check_aligned(x, m, p)?;
    let mut out = Tensor::zeros(x.dim());
    for ((mut o, xc), pc) in out.outer_iter_mut().zip(x.outer_iter()).zip(p.outer_iter()) {
        Zip::from(&mut o).and(&xc).and(&pc).and(m).for_each(|o, &xv, &pv, &mv| {
            *o = xv * mv + pv * (1.0 - mv);
        });
    }
    Ok(out)
}

/// `x * (1 - m) + p * m`.
pub fn compose_background(x: &Tensor, m: &Array2<f64>, p: &Tensor) -> Result<Tensor> {
    check_aligned(x, m, p)?;
    let mut out = Tensor::zeros(x.dim());
    for ((mut o, xc), pc) in out.outer_iter_mut().zip(x.outer_iter()).zip(p.outer_iter()) {
        Zip::from(&mut o).and(&xc).and(&pc).and(m).for_each(|o, &xv, &pv, &mv| {
            *o = xv * (1.0 - mv) + pv * mv;
        });
    }
    Ok(out)
}

/// Gradient with respect to the mask of a scalar whose gradient with respect
/// to the foreground composite is `grad`: `sum_c grad * (x - p)`.
/// Negate for the background composite.
pub fn foreground_mask_grad(x: &Tensor, p: &Tensor, grad: &Tensor) -> Array2<f64> {
    let (_, h, w) = x.dim();
    let mut out = Array2::zeros((h, w));
    for ((xc, pc), gc) in x.outer_iter().zip(p.outer_iter()).zip(grad.outer_iter()) {
        Zip::from(&mut out).and(&xc).and(&pc).and(&gc).for_each(|o, &xv, &pv, &gv| {
            *o += gv * (xv - pv);
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
    const STD: [f64; 3] = [0.229, 0.224, 0.225];

    fn image(h: usize, w: usize) -> ImageTensor {
        let px = Tensor::from_shape_fn((3, h, w), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 17) as f64 / 16.0);
        ImageTensor::from_pixels(px, &MEAN, &STD).unwrap()
    }

    #[test]
    fn gray_baseline_normalizes_to_zero() {
        let p = make_baseline(&BaselineKind::GrayMean, &image(5, 4)).unwrap();
        assert!(p.normalized().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_preserves_constants() {
        let px = Tensor::from_elem((3, 9, 13), 0.37);
        let out = gaussian_blur(&px, DEFAULT_BLUR_RADIUS).unwrap();
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-14));
    }

    #[test]
    fn blur_of_impulse_is_the_kernel() {
        let r = DEFAULT_BLUR_RADIUS;
        let n = 47;
        let mut px = Tensor::zeros((1, n, n));
        px[[0, 23, 23]] = 1.0;
        let out = gaussian_blur(&px, r).unwrap();
        // independent evaluation of exp(-(dy^2 + dx^2) / (2 sigma^2)), normalized over the window
        let sigma = 5.0;
        let mut direct = Array2::<f64>::zeros((2 * r + 1, 2 * r + 1));
        for ((i, j), v) in direct.indexed_iter_mut() {
            let (dy, dx) = (i as f64 - r as f64, j as f64 - r as f64);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
        let total = direct.sum();
        for ((i, j), v) in direct.indexed_iter() {
            let got = out[[0, 23 - r + i, 23 - r + j]];
            assert!((got - v / total).abs() < 1e-15, "({i},{j})");
        }
        let outside: f64 = out.sum() - direct.sum() / total;
        assert!(outside.abs() < 1e-12);
        assert!((sigma - r as f64 / 2.2).abs() < 1e-12);
    }

    #[test]
    fn reflect_folds_without_repeating_edges() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        // windows wider than the image keep folding
        assert_eq!(reflect(-9, 3), 1);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn zero_radius_is_config_error() {
        let err = make_baseline(&BaselineKind::GaussianBlur { radius: 0 }, &image(4, 4)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn noise_is_seeded_and_clipped() {
        let x = image(6, 6);
        let a = make_baseline(&BaselineKind::GaussianNoise { seed: 9 }, &x).unwrap();
        let b = make_baseline(&BaselineKind::GaussianNoise { seed: 9 }, &x).unwrap();
        let c = make_baseline(&BaselineKind::GaussianNoise { seed: 10 }, &x).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn composite_special_masks() {
        let x = image(4, 5);
        let p = make_baseline(&BaselineKind::default(), &x).unwrap();
        let (xn, pn) = (x.normalized(), p.normalized());
        let ones = Array2::ones((4, 5));
        let zeros = Array2::zeros((4, 5));
        let half = Array2::from_elem((4, 5), 0.5);
        assert_eq!(&compose_foreground(xn, &ones, pn).unwrap(), xn);
        assert_eq!(&compose_foreground(xn, &zeros, pn).unwrap(), pn);
        assert_eq!(compose_foreground(xn, &half, pn).unwrap(), (xn + pn) / 2.0);
        assert_eq!(&compose_background(xn, &ones, pn).unwrap(), pn);
        assert_eq!(&compose_background(xn, &zeros, pn).unwrap(), xn);
    }

    #[test]
    fn composite_shape_mismatch() {
        let x = image(4, 5);
        let err = compose_foreground(x.normalized(), &Array2::ones((5, 4)), x.normalized()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn mask_gradient_matches_finite_differences() {
        let x = image(3, 4);
        let p = make_baseline(&BaselineKind::GaussianNoise { seed: 1 }, &x).unwrap();
        let (xn, pn) = (x.normalized(), p.normalized());
        let probe = Tensor::from_shape_fn(xn.dim(), |(c, y, x)| ((c + 2 * y + 3 * x) as f64).cos());
        let m = Array2::from_shape_fn((3, 4), |(y, x)| 0.1 + 0.07 * (y * 4 + x) as f64);
        let f = |m: &Array2<f64>| (&compose_foreground(xn, m, pn).unwrap() * &probe).sum();
        let g = foreground_mask_grad(xn, pn, &probe);
        for y in 0..3 {
            for x in 0..4 {
                let mut mp = m.clone();
                mp[[y, x]] += 1e-6;
                let mut mm = m.clone();
                mm[[y, x]] -= 1e-6;
                let fd = (f(&mp) - f(&mm)) / 2e-6;
                assert!((fd - g[[y, x]]).abs() < 1e-7);
            }
        }
    }

    proptest! {
        #[test]
        fn composite_identities(vals in proptest::collection::vec(0.0f64..=1.0, 20), seed in 0u64..50) {
            let x = image(4, 5);
            let p = make_baseline(&BaselineKind::GaussianNoise { seed }, &x).unwrap();
            let (xn, pn) = (x.normalized(), p.normalized());
            let m = Array2::from_shape_vec((4, 5), vals).unwrap();
            let fg = compose_foreground(xn, &m, pn).unwrap();
            let bg = compose_background(xn, &m, pn).unwrap();
            let flipped = compose_foreground(xn, &m.mapv(|v| 1.0 - v), pn).unwrap();
            let sum = xn + pn;
            for i in 0..fg.len() {
                let (a, b) = (xn.as_slice().unwrap()[i], pn.as_slice().unwrap()[i]);
                let f = fg.as_slice().unwrap()[i];
                prop_assert!((f + bg.as_slice().unwrap()[i] - sum.as_slice().unwrap()[i]).abs() < 1e-12);
                prop_assert!((bg.as_slice().unwrap()[i] - flipped.as_slice().unwrap()[i]).abs() < 1e-12);
                prop_assert!(f >= a.min(b) - 1e-12 && f <= a.max(b) + 1e-12);
            }
        }
    }
}
