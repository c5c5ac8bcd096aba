//! Atrous (dilated) 2-D convolution.
//!
//! Output element `(n, o, i, j)` reads input taps at
//! `(s*i + r*ki - pad_top, s*j + r*kj - pad_left)`; taps outside the map
//! read zero. With "same-atrous" padding the pad is `r*(k-1)/2` per side and
//! the stride is applied after rate sampling, so a strided layer is exactly
//! a decimated stride-1 layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Pad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `rate * (k - 1) / 2` zeros on every side.
    SameAtrous,
    Explicit(Pad),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// Shape `(c_out, c_in, k, k)`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub rate: usize,
    pub stride: usize,
    pub padding: Padding,
}

/// Gradients of `sum(grad_out * conv(x))`.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub grad_x: Tensor,
    pub grad_w: Tensor,
    pub grad_bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(weights: Tensor, bias: Vec<f64>, rate: usize, stride: usize, padding: Padding) -> Result<Self> {
        let [c_out, _, kh, kw] = weights.shape();
        if kh != kw || kh % 2 == 0 {
            return config_err(format!("kernel must be square with odd size, got {kh}x{kw}"));
        }
        if bias.len() != c_out {
            return config_err(format!("bias length {} for {c_out} output channels", bias.len()));
        }
        if rate == 0 || stride == 0 {
            return config_err("rate and stride must be positive");
        }
        Ok(ConvLayer { weights, bias, rate, stride, padding })
    }

    /// Fan-in scaled Gaussian weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn he_init<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weights = Tensor::from_fn([c_out, c_in, k, k], |_, _, _, _| normal.sample(rng));
        ConvLayer::new(weights, vec![0.0; c_out], 1, 1, Padding::SameAtrous)
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn resolved_padding(&self) -> Pad {
        match self.padding {
            Padding::SameAtrous => Pad::uniform(self.rate * (self.kernel() - 1) / 2),
            Padding::Explicit(p) => p,
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let pad = self.resolved_padding();
        let span = self.rate * (self.kernel() - 1) + 1;
        let (ph, pw) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
        if ph < span || pw < span {
            return config_err(format!("padded input {ph}x{pw} smaller than dilated kernel span {span}"));
        }
        Ok(((ph - span) / self.stride + 1, (pw - span) / self.stride + 1))
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.c() != self.c_in() {
            return config_err(format!("input has {} channels, layer expects {}", x.c(), self.c_in()));
        }
        if x.h() == 0 || x.w() == 0 {
            return config_err("zero-sized spatial input");
        }
        self.output_size(x.h(), x.w())
    }

    /// Reference path: one multiply-add per tap, summed in
    /// (channel, kernel row, kernel column) order after the bias.
    pub fn forward_direct(&self, x: &Tensor) -> Result<Tensor> {
        let (oh, ow) = self.check_input(x)?;
        let [n, c_in, h, w] = x.shape();
        let (c_out, k) = (self.c_out(), self.kernel());
        let pad = self.resolved_padding();
        let (r, s) = (self.rate as isize, self.stride as isize);
        let mut out = Tensor::zeros([n, c_out, oh, ow]);
        for b in 0..n {
            for o in 0..c_out {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = self.bias[o];
                        for c in 0..c_in {
                            for ki in 0..k {
                                let y = s * i as isize + r * ki as isize - pad.top as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let xx = s * j as isize + r * kj as isize - pad.left as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    acc += x.get(b, c, y as usize, xx as usize) * self.weights.get(o, c, ki, kj);
                                }
                            }
                        }
                        out.set(b, o, i, j, acc);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch-gathering path (im2col + GEMM). Agrees with
    /// [`ConvLayer::forward_direct`] to rounding.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (oh, ow) = self.check_input(x)?;
        let n = x.n();
        let (c_out, kk) = (self.c_out(), self.c_in() * self.kernel() * self.kernel());
        let p = oh * ow;
        let mut out = Tensor::zeros([n, c_out, oh, ow]);
        let mut cols = Vec::new();
        for b in 0..n {
            let patches = self.patches(x, b, oh, ow, &mut cols);
            let dst = out.sample_mut(b);
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(self.bias[o]);
            }
            gemm(c_out, kk, p, self.weights.data(), false, patches, false, dst, 1.0);
        }
        Ok(out)
    }

    /// Returns the `(c_in*k*k) x (oh*ow)` patch matrix for sample `b`,
    /// borrowing the input directly for plain 1x1 stride-1 layers.
    fn patches<'a>(&self, x: &'a Tensor, b: usize, oh: usize, ow: usize, buf: &'a mut Vec<f64>) -> &'a [f64] {
        if self.is_pointwise() {
            return x.sample(b);
        }
        let [_, c_in, h, w] = x.shape();
        let k = self.kernel();
        let pad = self.resolved_padding();
        let p = oh * ow;
        buf.clear();
        buf.resize(c_in * k * k * p, 0.0);
        let (r, s) = (self.rate as isize, self.stride as isize);
        for c in 0..c_in {
            let plane = x.plane(b, c);
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut buf[((c * k + ki) * k + kj) * p..][..p];
                    let dx = r * kj as isize - pad.left as isize;
                    for i in 0..oh {
                        let y = s * i as isize + r * ki as isize - pad.top as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let src = &plane[y as usize * w..(y as usize + 1) * w];
                        let dst = &mut row[i * ow..(i + 1) * ow];
                        for (j, d) in dst.iter_mut().enumerate() {
                            let xx = s * j as isize + dx;
                            if xx >= 0 && xx < w as isize {
                                *d = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
        buf
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.resolved_padding() == Pad::default()
    }

    /// Reverse-mode gradients; `grad_x` is the transposed (full) atrous
    /// correlation of `grad_out`.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let (oh, ow) = self.check_input(x)?;
        let n = x.n();
        if grad_out.shape() != [n, self.c_out(), oh, ow] {
            return shape_err(format!(
                "grad_out {:?} does not match forward output {:?}",
                grad_out.shape(),
                [n, self.c_out(), oh, ow]
            ));
        }
        let [_, c_in, h, w] = x.shape();
        let (c_out, k) = (self.c_out(), self.kernel());
        let kk = c_in * k * k;
        let p = oh * ow;
        let mut grad_w = Tensor::zeros(self.weights.shape());
        let mut grad_bias = vec![0.0; c_out];
        let mut grad_x = Tensor::zeros(x.shape());
        let mut cols = Vec::new();
        let mut grad_cols = vec![0.0; kk * p];
        for b in 0..n {
            let g = grad_out.sample(b);
            for (o, row) in g.chunks(p).enumerate() {
                grad_bias[o] += row.iter().sum::<f64>();
            }
            let patches = self.patches(x, b, oh, ow, &mut cols);
            // dW += G * P^T
            gemm(c_out, p, kk, g, false, patches, true, grad_w.data_mut(), 1.0);
            if self.is_pointwise() {
                gemm(kk, c_out, p, self.weights.data(), true, g, false, grad_x.sample_mut(b), 1.0);
                continue;
            }
            grad_cols.fill(0.0);
            gemm(kk, c_out, p, self.weights.data(), true, g, false, &mut grad_cols, 0.0);
            let pad = self.resolved_padding();
            let (r, s) = (self.rate as isize, self.stride as isize);
            for c in 0..c_in {
                let plane = grad_x.plane_mut(b, c);
                for ki in 0..k {
                    for kj in 0..k {
                        let row = &grad_cols[((c * k + ki) * k + kj) * p..][..p];
                        let dx = r * kj as isize - pad.left as isize;
                        for i in 0..oh {
                            let y = s * i as isize + r * ki as isize - pad.top as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                            for (j, v) in row[i * ow..(i + 1) * ow].iter().enumerate() {
                                let xx = s * j as isize + dx;
                                if xx >= 0 && xx < w as isize {
                                    dst[xx as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGrads { grad_x, grad_w, grad_bias })
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`; `ta`/`tb`
/// read the stored matrix as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above cover every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Mean fraction of the `k*k` taps that land on the unpadded map, over all
/// stride-1 same-atrous output positions.
pub fn valid_weight_fraction(feature_h: usize, feature_w: usize, k: usize, rate: usize) -> f64 {
    assert!(feature_h >= 1 && feature_w >= 1 && k % 2 == 1 && rate >= 1);
    // Valid taps factor into independent row and column counts.
    let axis_mean = |len: usize| -> f64 {
        let half = (k / 2) as isize;
        let total: usize = (0..len as isize)
            .map(|i| {
                (-half..=half)
                    .filter(|t| {
                        let p = i + t * rate as isize;
                        p >= 0 && p < len as isize
                    })
                    .count()
            })
            .sum();
        total as f64 / len as f64
    };
    axis_mean(feature_h) * axis_mean(feature_w) / (k * k) as f64
}
