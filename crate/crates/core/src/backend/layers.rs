//! Inference-mode CNN layers with a vector-Jacobian product back to their input.
//!
//! Every feature map is a `(channels, height, width)` array; fully connected
//! layers see a flattened `(features, 1, 1)` view.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type Tensor = Array3<f64>;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out, in, kh, kw)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    /// False for convolutions followed by batch norm, whose weight files
    /// carry no bias tensor.
    pub has_bias: bool,
}

impl Conv2d {
    pub fn new(weight: Array4<f64>, bias: Array1<f64>, stride: usize, padding: usize) -> Self {
        assert!(stride > 0, "stride must be positive");
        assert_eq!(weight.dim().0, bias.len(), "bias length must match out channels");
        Self { weight, bias, stride, padding, has_bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(Array4::zeros((out_ch, in_ch, kernel, kernel)), Array1::zeros(out_ch), stride, padding)
    }

    fn kernel(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (kh, kw)
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(Error::input(format!("conv kernel {kh}x{kw} larger than padded input {ph}x{pw}")));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (o, i, _, _) = self.weight.dim();
        if c != i {
            return Err(Error::input(format!("conv expects {i} input channels, got {c}")));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        Ok((o, oh, ow))
    }

    fn flat_weight(&self) -> ArrayView2<'_, f64> {
        let (o, i, kh, kw) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * kh * kw)).expect("conv weight is contiguous")
    }

    /// Unfolds the padded input into `(in * kh * kw, oh * ow)` columns.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (kh, kw) = self.kernel();
        let pad = self.padding as isize;
        let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ci);
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().expect("row is contiguous");
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = plane.row(iy as usize);
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, (c, h, w): (usize, usize, usize), oh: usize, ow: usize) -> Tensor {
        let (kh, kw) = self.kernel();
        let pad = self.padding as isize;
        let mut out = Tensor::zeros((c, h, w));
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let src = cols.row(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                out[[ci, iy as usize, ix as usize]] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (o, oh, ow) = self.output_shape(x.dim())?;
        let cols = self.im2col(x, oh, ow);
        let mut out = self.flat_weight().dot(&cols);
        for (mut row, b) in out.outer_iter_mut().zip(self.bias.iter()) {
            row += *b;
        }
        Ok(out.into_shape_with_order((o, oh, ow)).expect("conv output is contiguous"))
    }

    pub fn backward(&self, input_dim: (usize, usize, usize), grad_out: &Tensor) -> Tensor {
        let (o, oh, ow) = grad_out.dim();
        let g =
            grad_out.as_standard_layout().into_owned().into_shape_with_order((o, oh * ow)).expect("grad is contiguous");
        let cols = self.flat_weight().t().dot(&g);
        self.col2im(&cols, input_dim, oh, ow)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(weight.nrows(), bias.len(), "bias length must match out features");
        Self { weight, bias }
    }

    pub fn zeros(out_f: usize, in_f: usize) -> Self {
        Self::new(Array2::zeros((out_f, in_f)), Array1::zeros(out_f))
    }

    fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        if c * h * w != self.weight.ncols() || h != 1 || w != 1 {
            return Err(Error::input(format!(
                "linear layer expects ({}, 1, 1), got ({c}, {h}, {w})",
                self.weight.ncols()
            )));
        }
        Ok((self.weight.nrows(), 1, 1))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (o, _, _) = self.output_shape(x.dim())?;
        let v = x.iter().copied().collect::<Array1<f64>>();
        let y = self.weight.dot(&v) + &self.bias;
        Ok(y.into_shape_with_order((o, 1, 1)).expect("vector reshape"))
    }

    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        let g = grad_out.iter().copied().collect::<Array1<f64>>();
        let gi = self.weight.t().dot(&g);
        let n = gi.len();
        gi.into_shape_with_order((n, 1, 1)).expect("vector reshape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::input(format!("pool window {} larger than input {h}x{w}", self.kernel)));
        }
        Ok((c, (ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    /// Flat `(y, x)` index of the winning input pixel for each output pixel.
    /// Ties go to the first element in row-major window order.
    fn winners(&self, x: &Tensor) -> Result<(Tensor, Vec<(usize, usize)>)> {
        let (c, oh, ow) = self.output_shape(x.dim())?;
        let (_, h, w) = x.dim();
        let pad = self.padding as isize;
        let mut out = Tensor::zeros((c, oh, ow));
        let mut idx = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = (0usize, 0usize);
                    let mut found = false;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[[ci, iy as usize, ix as usize]];
                            if !found || v > best {
                                best = v;
                                at = (iy as usize, ix as usize);
                                found = true;
                            }
                        }
                    }
                    out[[ci, oy, ox]] = best;
                    idx.push(at);
                }
            }
        }
        Ok((out, idx))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.winners(x).map(|(out, _)| out)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        let (_, idx) = self.winners(input).expect("shape checked during forward");
        let (c, oh, ow) = grad_out.dim();
        let mut g = Tensor::zeros(input.dim());
        let mut k = 0;
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (iy, ix) = idx[k];
                    g[[ci, iy, ix]] += grad_out[[ci, oy, ox]];
                    k += 1;
                }
            }
        }
        g
    }
}

/// PyTorch-style adaptive average pooling: output cell `i` averages input
/// rows `floor(i*H/out) .. ceil((i+1)*H/out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptiveAvgPool2d {
    pub out_h: usize,
    pub out_w: usize,
}

impl AdaptiveAvgPool2d {
    fn bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
        let start = i * input / output;
        let end = ((i + 1) * input).div_ceil(output);
        (start, end)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (c, h, w) = x.dim();
        let mut out = Tensor::zeros((c, self.out_h, self.out_w));
        for oy in 0..self.out_h {
            let (y0, y1) = Self::bounds(oy, h, self.out_h);
            for ox in 0..self.out_w {
                let (x0, x1) = Self::bounds(ox, w, self.out_w);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for ci in 0..c {
                    out[[ci, oy, ox]] = x.slice(s![ci, y0..y1, x0..x1]).sum() / n;
                }
            }
        }
        out
    }

    pub fn backward(&self, (c, h, w): (usize, usize, usize), grad_out: &Tensor) -> Tensor {
        let mut g = Tensor::zeros((c, h, w));
        for oy in 0..self.out_h {
            let (y0, y1) = Self::bounds(oy, h, self.out_h);
            for ox in 0..self.out_w {
                let (x0, x1) = Self::bounds(ox, w, self.out_w);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for ci in 0..c {
                    let share = grad_out[[ci, oy, ox]] / n;
                    g.slice_mut(s![ci, y0..y1, x0..x1]).mapv_inplace(|v| v + share);
                }
            }
        }
        g
    }
}

/// Batch normalization frozen to its running statistics, folded into a
/// per-channel affine map.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;

    pub fn identity(channels: usize) -> Self {
        Self { scale: Array1::ones(channels), shift: Array1::zeros(channels) }
    }

    pub fn from_stats(
        gamma: &Array1<f64>,
        beta: &Array1<f64>,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
    ) -> Self {
        let scale = gamma / &running_var.mapv(|v| (v + Self::EPS).sqrt());
        let shift = beta - &(running_mean * &scale);
        Self { scale, shift }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim().0 != self.scale.len() {
            return Err(Error::input(format!("batch norm expects {} channels, got {}", self.scale.len(), x.dim().0)));
        }
        let mut out = x.clone();
        for (ci, mut plane) in out.outer_iter_mut().enumerate() {
            let (a, b) = (self.scale[ci], self.shift[ci]);
            plane.mapv_inplace(|v| a * v + b);
        }
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for (ci, mut plane) in g.outer_iter_mut().enumerate() {
            let a = self.scale[ci];
            plane.mapv_inplace(|v| a * v);
        }
        g
    }
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    g.zip_mut_with(input, |gv, &xv| {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

pub(crate) fn flatten(x: &Tensor) -> Tensor {
    let v: Vec<f64> = x.iter().copied().collect();
    let n = v.len();
    Tensor::from_shape_vec((n, 1, 1), v).expect("vector reshape")
}

pub(crate) fn unflatten(grad: &Tensor, shape: (usize, usize, usize)) -> Tensor {
    Tensor::from_shape_vec(shape, grad.iter().copied().collect()).expect("same element count")
}

pub(crate) fn conv_output_shape(conv: &Conv2d, dim: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    conv.output_shape(dim)
}

pub(crate) fn linear_output_shape(lin: &Linear, dim: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    lin.output_shape(dim)
}

pub(crate) fn pool_output_shape(pool: &MaxPool2d, dim: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    pool.output_shape(dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn direct_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (o, i, kh, kw) = conv.weight.dim();
        let (_, h, w) = x.dim();
        let (oh, ow) = conv.out_hw(h, w).unwrap();
        let mut out = Tensor::zeros((o, oh, ow));
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[oc];
                    for ic in 0..i {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += conv.weight[[oc, ic, ky, kx]] * x[[ic, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[oc, oy, ox]] = acc;
                }
            }
        }
        out
    }

    fn pseudo(shape: (usize, usize, usize), seed: f64) -> Tensor {
        Array::from_shape_fn(shape, |(a, b, c)| ((a * 31 + b * 7 + c) as f64 * 0.37 + seed).sin())
    }

    #[test]
    fn ones_kernel_center_is_nine() {
        let conv = Conv2d::new(Array4::ones((1, 1, 3, 3)), Array1::zeros(1), 1, 1);
        let y = conv.forward(&Tensor::ones((1, 3, 3))).unwrap();
        assert_eq!(y[[0, 1, 1]], 9.0);
        assert_eq!(y[[0, 0, 0]], 4.0);
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(stride, padding, k) in &[(1, 1, 3), (2, 0, 3), (4, 2, 11), (1, 0, 1)] {
            let w = Array4::from_shape_fn((3, 2, k, k), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) as f64).cos());
            let conv = Conv2d::new(w, Array1::from(vec![0.1, -0.2, 0.3]), stride, padding);
            let x = pseudo((2, 13, 12), 0.5);
            let a = conv.forward(&x).unwrap();
            let b = direct_conv(&conv, &x);
            assert_eq!(a.dim(), b.dim());
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x) - b, g> == <x, conv^T g>
        let w = Array4::from_shape_fn((3, 2, 3, 3), |(a, b, c, d)| ((a * 3 + b + c * 2 + d) as f64 * 0.3).sin());
        let conv = Conv2d::new(w, Array1::zeros(3), 2, 1);
        let x = pseudo((2, 9, 8), 0.1);
        let y = conv.forward(&x).unwrap();
        let g = pseudo(y.dim(), 1.3);
        let gx = conv.backward(x.dim(), &g);
        let lhs: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let pool = MaxPool2d { kernel: 2, stride: 2, padding: 0 };
        let x = Tensor::from_shape_vec((1, 2, 2), vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(pool.forward(&x).unwrap()[[0, 0, 0]], 5.0);
        let g = pool.backward(&x, &Tensor::from_elem((1, 1, 1), 2.0));
        assert_eq!(g.iter().copied().collect::<Vec<_>>(), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn padded_maxpool_ignores_padding() {
        let pool = MaxPool2d { kernel: 3, stride: 2, padding: 1 };
        let x = Tensor::from_elem((1, 4, 4), -3.0);
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.dim(), (1, 2, 2));
        assert!(y.iter().all(|&v| v == -3.0));
    }

    #[test]
    fn adaptive_pool_global_average() {
        let pool = AdaptiveAvgPool2d { out_h: 1, out_w: 1 };
        let x = Tensor::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(pool.forward(&x)[[0, 0, 0]], 3.0);
        let g = pool.backward(x.dim(), &Tensor::from_elem((1, 1, 1), 4.0));
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adaptive_pool_identity_when_sizes_match() {
        let pool = AdaptiveAvgPool2d { out_h: 3, out_w: 3 };
        let x = pseudo((2, 3, 3), 0.0);
        assert_eq!(pool.forward(&x), x);
    }

    #[test]
    fn adaptive_pool_overlapping_windows_backward_is_adjoint() {
        let pool = AdaptiveAvgPool2d { out_h: 3, out_w: 2 };
        let x = pseudo((2, 5, 7), 0.2);
        let y = pool.forward(&x);
        let g = pseudo(y.dim(), 2.0);
        let gx = pool.backward(x.dim(), &g);
        let lhs: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_shape_errors() {
        let lin = Linear::zeros(2, 4);
        assert!(lin.forward(&Tensor::zeros((3, 1, 1))).is_err());
        assert_eq!(lin.forward(&Tensor::zeros((4, 1, 1))).unwrap().dim(), (2, 1, 1));
    }

    #[test]
    fn batchnorm_folds_running_stats() {
        let bn = BatchNorm2d::from_stats(
            &Array1::from(vec![2.0]),
            &Array1::from(vec![1.0]),
            &Array1::from(vec![3.0]),
            &Array1::from(vec![4.0 - BatchNorm2d::EPS]),
        );
        let y = bn.forward(&Tensor::from_elem((1, 1, 1), 5.0)).unwrap();
        // 2 * (5 - 3) / 2 + 1
        assert!((y[[0, 0, 0]] - 3.0).abs() < 1e-12);
    }
}
