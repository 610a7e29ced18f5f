//! Saliency masks built from channel weights: weighted channel sum, min-max
//! normalization, corner-aligned bilinear upsampling, and the reverse pass of
//! that pipeline back to the weights.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::Tensor;
use crate::error::{Error, Result};

/// One nonnegative weight per base-layer channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskWeights(Vec<f64>);

impl MaskWeights {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|w| w * c).collect())
    }

    /// Entries with magnitude below `tol`.
    pub fn count_near_zero(&self, tol: f64) -> usize {
        self.0.iter().filter(|w| w.abs() < tol).count()
    }
}

/// Entrywise `max(w, 0)`.
pub fn clip_nonneg(weights: &MaskWeights) -> MaskWeights {
    MaskWeights(weights.0.iter().map(|&w| w.max(0.0)).collect())
}

/// `sum_i w_i * acts[i]` over the channel axis.
pub fn channel_mask(weights: &MaskWeights, acts: &Tensor) -> Result<Array2<f64>> {
    let (c, h, w) = acts.dim();
    if weights.len() != c {
        return Err(Error::input(format!("{} mask weights for {c} activation channels", weights.len())));
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for (wi, plane) in weights.0.iter().zip(acts.outer_iter()) {
        if *wi != 0.0 {
            out.scaled_add(*wi, &plane);
        }
    }
    Ok(out)
}

/// Where the extrema of a min-max normalized grid sat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMaxInfo {
    pub min: f64,
    pub max: f64,
    pub argmin: (usize, usize),
    pub argmax: (usize, usize),
}

impl MinMaxInfo {
    /// Constant input: normalization divides by zero and the grid is zeroed.
    pub fn is_degenerate(&self) -> bool {
        self.max == self.min
    }
}

/// `(g - min) / (max - min)`; a constant grid maps to all zeros.
/// Extrema ties resolve to the first row-major position.
pub fn minmax_normalize(grid: &Array2<f64>) -> Result<(Array2<f64>, MinMaxInfo)> {
    if grid.is_empty() {
        return Err(Error::input("cannot normalize an empty grid"));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("grid contains NaN or infinite values"));
    }
    let mut info = MinMaxInfo { min: f64::INFINITY, max: f64::NEG_INFINITY, argmin: (0, 0), argmax: (0, 0) };
    for (idx, &v) in grid.indexed_iter() {
        if v < info.min {
            info.min = v;
            info.argmin = idx;
        }
        if v > info.max {
            info.max = v;
            info.argmax = idx;
        }
    }
    if info.is_degenerate() {
        return Ok((Array2::zeros(grid.dim()), info));
    }
    let range = info.max - info.min;
    Ok((grid.mapv(|v| (v - info.min) / range), info))
}

/// Reverse pass of `minmax_normalize` for a non-degenerate grid.
fn minmax_backward(normalized: &Array2<f64>, info: &MinMaxInfo, grad: &Array2<f64>) -> Array2<f64> {
    let range = info.max - info.min;
    let mut out = grad.mapv(|g| g / range);
    // d n_i / d min = (n_i - 1) / range, d n_i / d max = -n_i / range
    let mut d_min = 0.0;
    let mut d_max = 0.0;
    for (&g, &n) in grad.iter().zip(normalized.iter()) {
        d_min += g * (n - 1.0);
        d_max -= g * n;
    }
    out[info.argmin] += d_min / range;
    out[info.argmax] += d_max / range;
    out
}

/// Separable corner-aligned bilinear interpolation as a pair of matrices:
/// `out = rows . grid . cols^T`.
#[derive(Debug, Clone)]
pub struct Upsampler {
    rows: Array2<f64>,
    cols: Array2<f64>,
}

fn interp_matrix(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((dst, src));
    for y in 0..dst {
        if src == 1 || dst == 1 {
            m[[y, 0]] = 1.0;
            continue;
        }
        // exact rational source coordinate y * (src-1) / (dst-1)
        let num = y * (src - 1);
        let den = dst - 1;
        let i0 = num / den;
        let t = (num % den) as f64 / den as f64;
        if i0 + 1 >= src {
            m[[y, src - 1]] = 1.0;
        } else {
            m[[y, i0]] = 1.0 - t;
            m[[y, i0 + 1]] = t;
        }
    }
    m
}

impl Upsampler {
    pub fn new(source: (usize, usize), target: (usize, usize)) -> Result<Self> {
        if source.0 == 0 || source.1 == 0 {
            return Err(Error::input("cannot upsample an empty grid"));
        }
        if target.0 < source.0 || target.1 < source.1 {
            return Err(Error::input(format!("upsampling target {target:?} is smaller than source {source:?}")));
        }
        Ok(Self { rows: interp_matrix(source.0, target.0), cols: interp_matrix(source.1, target.1) })
    }

    pub fn source(&self) -> (usize, usize) {
        (self.rows.ncols(), self.cols.ncols())
    }

    pub fn target(&self) -> (usize, usize) {
        (self.rows.nrows(), self.cols.nrows())
    }

    pub fn forward(&self, grid: &Array2<f64>) -> Result<Array2<f64>> {
        if grid.dim() != self.source() {
            return Err(Error::input(format!("upsampler built for {:?}, got {:?}", self.source(), grid.dim())));
        }
        let out = self.rows.dot(grid).dot(&self.cols.t());
        // convex combinations; clamp away rounding overshoot of the extrema
        let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(out.mapv(|v| v.clamp(lo, hi)))
    }

    pub fn backward(&self, grad: &Array2<f64>) -> Array2<f64> {
        self.rows.t().dot(grad).dot(&self.cols)
    }
}

pub fn upsample_bilinear(grid: &Array2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    Upsampler::new(grid.dim(), target)?.forward(grid)
}

/// Everything `build_mask` computed, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct MaskBuild {
    /// Full-resolution mask in `[0, 1]`.
    pub mask: Array2<f64>,
    /// Normalized base-resolution grid.
    pub low_res: Array2<f64>,
    pub minmax: MinMaxInfo,
    upsampler: Upsampler,
}

impl MaskBuild {
    pub fn is_degenerate(&self) -> bool {
        self.minmax.is_degenerate()
    }

    /// Gradient with respect to the weights given the gradient with respect
    /// to the full-resolution mask.
    pub fn backward(&self, grad_mask: &Array2<f64>, acts: &Tensor) -> Result<Vec<f64>> {
        if self.is_degenerate() {
            return Err(Error::NotDifferentiable("mask is constant before normalization".into()));
        }
        if grad_mask.dim() != self.mask.dim() {
            return Err(Error::input(format!(
                "mask gradient {:?} does not match mask {:?}",
                grad_mask.dim(),
                self.mask.dim()
            )));
        }
        let g_low = self.upsampler.backward(grad_mask);
        let g_raw = minmax_backward(&self.low_res, &self.minmax, &g_low);
        Ok(acts.axis_iter(Axis(0)).map(|plane| (&plane * &g_raw).sum()).collect())
    }
}

/// Weighted channel sum, min-max normalized, upsampled to `target`.
pub fn build_mask(weights: &MaskWeights, acts: &Tensor, target: (usize, usize)) -> Result<MaskBuild> {
    let raw = channel_mask(weights, acts)?;
    let (low_res, minmax) = minmax_normalize(&raw)?;
    let upsampler = Upsampler::new(low_res.dim(), target)?;
    let mask = upsampler.forward(&low_res)?;
    Ok(MaskBuild { mask, low_res, minmax, upsampler })
}

/// The explanation artifact: a grid in `[0, 1]` at model-input resolution,
/// stored at the precision it is serialized with.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMask {
    data: Array2<f32>,
}

impl SaliencyMask {
    /// Converts a `[0, 1]` grid, rejecting non-finite values and values more
    /// than `1e-9` outside the unit interval.
    pub fn from_grid(grid: &Array2<f64>) -> Result<Self> {
        if grid.iter().any(|v| !v.is_finite() || *v < -1e-9 || *v > 1.0 + 1e-9) {
            return Err(Error::input("saliency values must be finite and within [0, 1]"));
        }
        Ok(Self { data: grid.mapv(|v| v.clamp(0.0, 1.0) as f32) })
    }

    pub fn from_f32(data: Array2<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::input("saliency values must be finite and within [0, 1]"));
        }
        Ok(Self { data })
    }

    pub fn filled(dim: (usize, usize), value: f32) -> Result<Self> {
        Self::from_f32(Array2::from_elem(dim, value))
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// `(height, width)`
    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Position of the largest value; ties go to the lowest row-major index.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut val = f32::NEG_INFINITY;
        for (idx, &v) in self.data.indexed_iter() {
            if v > val {
                val = v;
                best = idx;
            }
        }
        best
    }
}
