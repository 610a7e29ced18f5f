//! Straightforward reimplementation of the toy explainer used as a test
//! oracle. Shares no numerical code with the library: the checkpoint is
//! parsed by hand, the network runs as plain loops over forward-mode dual
//! numbers (one tangent per mask weight), and the optimizer loop is written
//! out directly.
#![allow(dead_code, clippy::needless_range_loop)]

use std::ops::{Add, Mul, Sub};

pub const N: usize = 4;
const H: usize = 8;
const W: usize = 8;

#[derive(Clone, Copy, Debug)]
pub struct D {
    pub v: f64,
    pub d: [f64; N],
}

impl D {
    pub fn c(v: f64) -> D {
        D { v, d: [0.0; N] }
    }
    fn scale(self, k: f64) -> D {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= k);
        D { v: self.v * k, d }
    }
    fn div(self, o: D) -> D {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] * o.v - self.v * o.d[i]) / (o.v * o.v);
        }
        D { v: self.v / o.v, d }
    }
    fn exp(self) -> D {
        let e = self.v.exp();
        D { v: e, d: self.d.map(|x| x * e) }
    }
}

impl Add for D {
    type Output = D;
    fn add(self, o: D) -> D {
        let mut d = self.d;
        for i in 0..N {
            d[i] += o.d[i];
        }
        D { v: self.v + o.v, d }
    }
}

impl Sub for D {
    type Output = D;
    fn sub(self, o: D) -> D {
        self + o.scale(-1.0)
    }
}

impl Mul for D {
    type Output = D;
    fn mul(self, o: D) -> D {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        D { v: self.v * o.v, d }
    }
}

pub struct ToyWeights {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

fn tensor(bytes: &[u8], header: &serde_json::Value, name: &str) -> Vec<f64> {
    let meta = &header[name];
    assert_eq!(meta["dtype"], "F64", "{name}");
    let start = meta["data_offsets"][0].as_u64().unwrap() as usize;
    let end = meta["data_offsets"][1].as_u64().unwrap() as usize;
    bytes[start..end].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

impl ToyWeights {
    pub fn parse(file: &[u8]) -> Self {
        let n = u64::from_le_bytes(file[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&file[8..8 + n]).unwrap();
        let data = &file[8 + n..];
        ToyWeights {
            conv1_w: tensor(data, &header, "conv1.weight"),
            conv1_b: tensor(data, &header, "conv1.bias"),
            conv2_w: tensor(data, &header, "conv2.weight"),
            conv2_b: tensor(data, &header, "conv2.bias"),
            fc_w: tensor(data, &header, "fc.weight"),
            fc_b: tensor(data, &header, "fc.bias"),
        }
    }
}

/// Feature map stored as `maps[c][y][x]`.
type Maps = Vec<Vec<Vec<D>>>;

fn conv3x3(input: &Maps, w: &[f64], b: &[f64], out_c: usize) -> Maps {
    let in_c = input.len();
    let (h, wd) = (input[0].len(), input[0][0].len());
    let mut out = vec![vec![vec![D::c(0.0); wd]; h]; out_c];
    for o in 0..out_c {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = D::c(b[o]);
                for c in 0..in_c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let k = w[((o * in_c + c) * 3 + ky) * 3 + kx];
                            acc = acc + input[c][iy as usize][ix as usize].scale(k);
                        }
                    }
                }
                out[o][y][x] = acc;
            }
        }
    }
    out
}

fn relu(m: Maps) -> Maps {
    m.into_iter()
        .map(|p| {
            p.into_iter().map(|r| r.into_iter().map(|v| if v.v > 0.0 { v } else { D::c(0.0) }).collect()).collect()
        })
        .collect()
}

fn maxpool2(m: &Maps) -> Maps {
    m.iter()
        .map(|p| {
            (0..p.len() / 2)
                .map(|y| {
                    (0..p[0].len() / 2)
                        .map(|x| {
                            let mut best = p[2 * y][2 * x];
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let c = p[2 * y + dy][2 * x + dx];
                                if c.v > best.v {
                                    best = c;
                                }
                            }
                            best
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub struct Taps {
    pub relu2: Maps,
    pub pool2: Maps,
    pub logits: Vec<D>,
}

pub fn forward(net: &ToyWeights, image: &[Vec<D>]) -> Taps {
    let input: Maps = vec![image.to_vec()];
    let a = maxpool2(&relu(conv3x3(&input, &net.conv1_w, &net.conv1_b, 4)));
    let relu2 = relu(conv3x3(&a, &net.conv2_w, &net.conv2_b, 4));
    let pool2 = maxpool2(&relu2);
    let flat: Vec<D> = pool2.iter().flat_map(|p| p.iter().flatten().copied()).collect();
    let logits = (0..net.fc_b.len())
        .map(|o| flat.iter().enumerate().fold(D::c(net.fc_b[o]), |acc, (i, v)| acc + v.scale(net.fc_w[o * 16 + i])))
        .collect();
    Taps { relu2, pool2, logits }
}

pub fn softmax_at(logits: &[D], c: usize) -> D {
    let max = logits.iter().map(|z| z.v).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<D> = logits.iter().map(|z| (*z - D::c(max)).exp()).collect();
    let sum = exps.iter().fold(D::c(0.0), |a, b| a + *b);
    exps[c].div(sum)
}

#[derive(Clone, Copy, Debug)]
pub enum Baseline {
    Gray,
    Blur(usize),
}

fn mirror(mut i: isize, n: isize) -> usize {
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Direct 2-D Gaussian blur, sigma = radius / 2.2, mirrored borders.
pub fn blur(px: &[Vec<f64>], radius: usize) -> Vec<Vec<f64>> {
    let sigma = radius as f64 / 2.2;
    let r = radius as isize;
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            total += (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let (h, w) = (px.len() as isize, px[0].len() as isize);
    let mut out = vec![vec![0.0; w as usize]; h as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let k = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / total;
                    acc += k * px[mirror(y + dy, h)][mirror(x + dx, w)];
                }
            }
            out[y as usize][x as usize] = acc;
        }
    }
    out
}

pub struct Setup {
    pub x: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub acts: Vec<Vec<Vec<f64>>>,
    pub target: Vec<f64>,
}

/// Normalizes an 8x8 `[0, 1]` image with the toy constants and records the
/// fixed per-run quantities.
pub fn setup(net: &ToyWeights, pixels: &[Vec<f64>], baseline: Baseline) -> Setup {
    let (mean, std) = (0.5, 0.25);
    let norm = |img: &[Vec<f64>]| -> Vec<Vec<f64>> {
        img.iter().map(|r| r.iter().map(|v| (v - mean) / std).collect()).collect()
    };
    let x = norm(pixels);
    let p = match baseline {
        Baseline::Gray => vec![vec![0.0; W]; H],
        Baseline::Blur(r) => norm(&blur(pixels, r)),
    };
    let consts: Vec<Vec<D>> = x.iter().map(|r| r.iter().map(|&v| D::c(v)).collect()).collect();
    let taps = forward(net, &consts);
    let acts = taps.relu2.iter().map(|p| p.iter().map(|r| r.iter().map(|d| d.v).collect()).collect()).collect();
    let target = taps.pool2.iter().flat_map(|p| p.iter().flatten().map(|d| d.v)).collect();
    Setup { x, p, acts, target }
}

/// Weighted channel sum, min-max normalization, corner-aligned bilinear
/// upsampling from 4x4 to 8x8. Returns `None` for a constant map.
pub fn mask(s: &Setup, w: &[f64]) -> Option<Vec<Vec<D>>> {
    let (h, wd) = (s.acts[0].len(), s.acts[0][0].len());
    let mut raw = vec![vec![D::c(0.0); wd]; h];
    for y in 0..h {
        for x in 0..wd {
            for i in 0..N {
                let mut d = [0.0; N];
                d[i] = s.acts[i][y][x];
                raw[y][x] = raw[y][x] + D { v: w[i] * s.acts[i][y][x], d };
            }
        }
    }
    let flat: Vec<D> = raw.iter().flatten().copied().collect();
    let mut lo = flat[0];
    let mut hi = flat[0];
    for v in &flat {
        if v.v < lo.v {
            lo = *v;
        }
        if v.v > hi.v {
            hi = *v;
        }
    }
    if hi.v == lo.v {
        return None;
    }
    let range = hi - lo;
    let norm: Vec<Vec<D>> = raw.iter().map(|r| r.iter().map(|v| (*v - lo).div(range)).collect()).collect();
    let mut out = vec![vec![D::c(0.0); W]; H];
    for (yy, row) in out.iter_mut().enumerate() {
        for (xx, o) in row.iter_mut().enumerate() {
            let sy = yy as f64 * (h - 1) as f64 / (H - 1) as f64;
            let sx = xx as f64 * (wd - 1) as f64 / (W - 1) as f64;
            let (y0, x0) = ((sy.floor() as usize).min(h - 2), (sx.floor() as usize).min(wd - 2));
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            let top = norm[y0][x0].scale(1.0 - tx) + norm[y0][x0 + 1].scale(tx);
            let bottom = norm[y0 + 1][x0].scale(1.0 - tx) + norm[y0 + 1][x0 + 1].scale(tx);
            *o = top.scale(1.0 - ty) + bottom.scale(ty);
        }
    }
    Some(out)
}

fn blend(a: &[Vec<f64>], b: &[Vec<f64>], m: &[Vec<D>]) -> Vec<Vec<D>> {
    (0..H).map(|y| (0..W).map(|x| m[y][x].scale(a[y][x]) + (D::c(1.0) - m[y][x]).scale(b[y][x])).collect()).collect()
}

fn l1(w: &[f64]) -> D {
    let mut d = [0.0; N];
    for i in 0..N {
        d[i] = if w[i] > 0.0 {
            1.0
        } else if w[i] < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    D { v: w.iter().map(|v| v.abs()).sum(), d }
}

/// `sum (f(phi) - f(x))^2 + gamma |w|_1` with its gradient.
pub fn inversion_loss(net: &ToyWeights, s: &Setup, w: &[f64], gamma: f64) -> D {
    let m = mask(s, w).expect("non-degenerate");
    let phi = blend(&s.x, &s.p, &m);
    let feats: Vec<D> = forward(net, &phi).pool2.iter().flat_map(|p| p.iter().flatten().copied()).collect();
    let err = feats.iter().zip(&s.target).fold(D::c(0.0), |acc, (f, t)| {
        let e = *f - D::c(*t);
        acc + e * e
    });
    err + l1(w).scale(gamma)
}

/// `-f_c(phi) + lambda f_c(phi_bg) + delta |w|_1` with its gradient.
pub fn target_loss(net: &ToyWeights, s: &Setup, w: &[f64], c: usize, lambda: f64, delta: f64) -> D {
    let m = mask(s, w).expect("non-degenerate");
    let fg = blend(&s.x, &s.p, &m);
    let bg = blend(&s.p, &s.x, &m);
    let pf = softmax_at(&forward(net, &fg).logits, c);
    let pb = softmax_at(&forward(net, &bg).logits, c);
    pf.scale(-1.0) + pb.scale(lambda) + l1(w).scale(delta)
}

pub struct Run {
    /// Weights after every iteration, stage 1 then stage 2.
    pub weights: Vec<Vec<f64>>,
    /// Loss before every iteration's step.
    pub losses: Vec<f64>,
}

pub struct RunCfg {
    pub iters1: usize,
    pub iters2: usize,
    pub lr: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub omega0: f64,
    pub class: usize,
}

fn adam_loop(
    w: &mut [f64],
    iters: usize,
    mut lr: f64,
    halve_every: Option<usize>,
    loss: impl Fn(&[f64]) -> D,
    run: &mut Run,
) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = [0.0; N];
    let mut v = [0.0; N];
    for t in 1..=iters {
        let l = loss(w);
        run.losses.push(l.v);
        for i in 0..N {
            let g = l.d[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            w[i] -= lr * mh / (vh.sqrt() + eps);
            if w[i] < 0.0 {
                w[i] = 0.0;
            }
        }
        run.weights.push(w.to_vec());
        if let Some(k) = halve_every {
            if t % k == 0 {
                lr /= 2.0;
            }
        }
    }
}

pub fn run(net: &ToyWeights, s: &Setup, cfg: &RunCfg) -> Run {
    let mut run = Run { weights: Vec::new(), losses: Vec::new() };
    let mut w = vec![cfg.omega0; N];
    adam_loop(&mut w, cfg.iters1, cfg.lr, None, |w| inversion_loss(net, s, w, cfg.gamma), &mut run);
    adam_loop(
        &mut w,
        cfg.iters2,
        cfg.lr,
        Some(10),
        |w| target_loss(net, s, w, cfg.class, cfg.lambda, cfg.delta),
        &mut run,
    );
    run
}
