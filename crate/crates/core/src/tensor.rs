//! Dense 4-D `f64` tensors in batch-channel-height-width layout.
//!
//! Every operation returns a new tensor unless its name ends in `_assign`
//! or it is reached through [`Tensor::data_mut`].

use std::fmt;

use crate::error::{shape_err, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// Per-side zero padding amounts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub fn uniform(p: usize) -> Self {
        Pad { top: p, bottom: p, left: p, right: p }
    }
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return shape_err(format!("{} values for shape {:?}", data.len(), shape));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.iter().product()] }
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place access to the raw buffer; the shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `h*w` plane for one (sample, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// All channels of one sample, `c*h*w` values.
    pub fn sample(&self, n: usize) -> &[f64] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * chw..(n + 1) * chw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("add {:?} and {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("compare {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Inner product of the flattened buffers.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("dot {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn zero_pad(&self, pad: Pad) -> Tensor {
        let [n, c, h, w] = self.shape;
        let (oh, ow) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for y in 0..h {
                    let d = (y + pad.top) * ow + pad.left;
                    dst[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
        out
    }

    /// Removes `pad` from each side; the inverse of [`Tensor::zero_pad`].
    pub fn crop(&self, pad: Pad) -> Result<Tensor> {
        let [_, _, h, w] = self.shape;
        if pad.top + pad.bottom > h || pad.left + pad.right > w {
            return shape_err(format!("crop {:?} exceeds {:?}", pad, self.shape));
        }
        Ok(self.window(pad.top, pad.left, h - pad.top - pad.bottom, w - pad.left - pad.right))
    }

    /// Copies the `wh x ww` window anchored at (`y0`, `x0`). Caller guarantees bounds.
    pub fn window(&self, y0: usize, x0: usize, wh: usize, ww: usize) -> Tensor {
        let [n, c, _, w] = self.shape;
        let mut out = Tensor::zeros([n, c, wh, ww]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for y in 0..wh {
                    let s = (y + y0) * w + x0;
                    dst[y * ww..(y + 1) * ww].copy_from_slice(&src[s..s + ww]);
                }
            }
        }
        out
    }

    /// Keeps rows and columns 0, s, 2s, ...
    pub fn subsample(&self, stride: usize) -> Tensor {
        assert!(stride >= 1, "subsample stride must be positive");
        if stride == 1 {
            return self.clone();
        }
        let [n, c, h, w] = self.shape;
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for y in 0..oh {
                    for x in 0..ow {
                        dst[y * ow + x] = src[y * stride * w + x * stride];
                    }
                }
            }
        }
        out
    }

    /// Mirrors every plane left-right.
    pub fn flip_horizontal(&self) -> Tensor {
        let w = self.w();
        let mut out = self.clone();
        for row in out.data.chunks_mut(w.max(1)) {
            row.reverse();
        }
        out
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let [n, _, h, w] = first.shape;
        if parts.iter().any(|t| t.n() != n || t.h() != h || t.w() != w) {
            return shape_err("concat operands disagree on batch or spatial size");
        }
        let c_total: usize = parts.iter().map(|t| t.c()).sum();
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for t in parts {
                data.extend_from_slice(t.sample(b));
            }
        }
        Ok(Tensor { shape: [n, c_total, h, w], data })
    }

    /// Channels `start..start+count` as a new tensor.
    pub fn narrow_channels(&self, start: usize, count: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        assert!(start + count <= c, "channel range out of bounds");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * count * hw);
        for b in 0..n {
            let s = self.sample(b);
            data.extend_from_slice(&s[start * hw..(start + count) * hw]);
        }
        Tensor { shape: [n, count, h, w], data }
    }

    /// Spatial mean per (sample, channel), shape (n, c, 1, 1).
    pub fn global_avg_pool(&self) -> Tensor {
        let [n, c, h, w] = self.shape;
        let area = (h * w) as f64;
        let mut data = Vec::with_capacity(n * c);
        for b in 0..n {
            for ch in 0..c {
                data.push(self.plane(b, ch).iter().sum::<f64>() / area);
            }
        }
        Tensor { shape: [n, c, 1, 1], data }
    }

    /// Align-corners bilinear resize to `out_h x out_w`.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Tensor {
        assert!(out_h >= 1 && out_w >= 1, "resize target must be non-empty");
        let [n, c, h, w] = self.shape;
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let ys = axis_taps(h, out_h);
        let xs = axis_taps(w, out_w);
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for (oy, ty) in ys.iter().enumerate() {
                    let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
                    let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
                    let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
                    for (d, tx) in drow.iter_mut().zip(&xs) {
                        let top = r0[tx.lo] * (1.0 - tx.frac) + r0[tx.hi] * tx.frac;
                        let bot = r1[tx.lo] * (1.0 - tx.frac) + r1[tx.hi] * tx.frac;
                        *d = top * (1.0 - ty.frac) + bot * ty.frac;
                    }
                }
            }
        }
        out
    }

    /// Transpose of [`Tensor::bilinear_resize`]: maps a gradient at the
    /// resized resolution back onto an `in_h x in_w` grid.
    pub fn bilinear_resize_backward(&self, in_h: usize, in_w: usize) -> Tensor {
        let [n, c, out_h, out_w] = self.shape;
        if (in_h, in_w) == (out_h, out_w) {
            return self.clone();
        }
        let ys = axis_taps(in_h, out_h);
        let xs = axis_taps(in_w, out_w);
        let mut out = Tensor::zeros([n, c, in_h, in_w]);
        for b in 0..n {
            for ch in 0..c {
                let g = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for (oy, ty) in ys.iter().enumerate() {
                    for (ox, tx) in xs.iter().enumerate() {
                        let v = g[oy * out_w + ox];
                        let top = v * (1.0 - ty.frac);
                        let bot = v * ty.frac;
                        dst[ty.lo * in_w + tx.lo] += top * (1.0 - tx.frac);
                        dst[ty.lo * in_w + tx.hi] += top * tx.frac;
                        dst[ty.hi * in_w + tx.lo] += bot * (1.0 - tx.frac);
                        dst[ty.hi * in_w + tx.hi] += bot * tx.frac;
                    }
                }
            }
        }
        out
    }
}

/// Source taps for one output index along an axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Align-corners source coordinates: `i * (in - 1) / (out - 1)`, or the
/// center when the output has a single sample.
pub(crate) fn axis_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    (0..out_len)
        .map(|i| {
            let src =
                if out_len > 1 { (i * (in_len - 1)) as f64 / (out_len - 1) as f64 } else { (in_len - 1) as f64 / 2.0 };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: if hi == lo { 0.0 } else { src - lo as f64 } }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product::<usize>();
        Tensor::new(shape, (0..len).map(|v| v as f64).collect()).unwrap()
    }

    fn pseudo_random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_pad_identity() {
        let x = seq([1, 1, 2, 2]);
        assert_eq!(x.zero_pad(Pad::default()), x);
    }

    #[test]
    fn zero_pad_single_value() {
        let x = Tensor::full([1, 1, 1, 1], 5.0);
        let y = x.zero_pad(Pad::uniform(1));
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        for yy in 0..3 {
            for xx in 0..3 {
                let want = if (yy, xx) == (1, 1) { 5.0 } else { 0.0 };
                assert_eq!(y.get(0, 0, yy, xx), want);
            }
        }
    }

    #[test]
    fn zero_pad_asymmetric_matches_index_shift() {
        let x = pseudo_random([1, 2, 4, 4], 3);
        let pad = Pad { top: 2, bottom: 1, left: 0, right: 3 };
        let y = x.zero_pad(pad);
        assert_eq!(y.shape(), [1, 2, 7, 7]);
        let mut interior = 0.0;
        for c in 0..2 {
            for yy in 0..7 {
                for xx in 0..7 {
                    let inside = (2..6).contains(&yy) && xx < 4;
                    let v = y.get(0, c, yy, xx);
                    if inside {
                        assert_eq!(v, x.get(0, c, yy - 2, xx));
                        interior += v;
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        assert!((interior - x.sum()).abs() < 1e-12);
    }

    #[test]
    fn subsample_examples() {
        let x = seq([1, 1, 5, 5]);
        let y = x.subsample(2);
        assert_eq!(y.data(), &[0.0, 2.0, 4.0, 10.0, 12.0, 14.0, 20.0, 22.0, 24.0]);
        assert_eq!(seq([1, 1, 4, 4]).subsample(2).shape(), [1, 1, 2, 2]);
        assert_eq!(x.subsample(1), x);
    }

    #[test]
    fn resize_identity_and_rows() {
        let x = pseudo_random([2, 3, 4, 5], 9);
        assert!(x.bilinear_resize(4, 5).max_abs_diff(&x).unwrap() < 1e-12);

        let row = Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(row.bilinear_resize(1, 3).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn resize_center_value() {
        let x = Tensor::new([1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = x.bilinear_resize(3, 3);
        // (0 + 2 + 4 + 6) / 4 at the midpoint of both axes
        assert!((y.get(0, 0, 1, 1) - 3.0).abs() < 1e-12);
        assert_eq!(y.get(0, 0, 0, 0), 0.0);
        assert_eq!(y.get(0, 0, 2, 2), 6.0);
    }

    #[test]
    fn resize_to_single_pixel_takes_center() {
        let x = Tensor::new([1, 1, 1, 3], vec![1.0, 2.0, 7.0]).unwrap();
        assert_eq!(x.bilinear_resize(1, 1).data(), &[2.0]);
    }

    #[test]
    fn resize_backward_is_transpose() {
        let x = pseudo_random([1, 2, 3, 4], 1);
        let g = pseudo_random([1, 2, 7, 6], 2);
        let lhs = x.bilinear_resize(7, 6).dot(&g).unwrap();
        let rhs = x.dot(&g.bilinear_resize_backward(3, 4)).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn global_pool_and_channel_ops() {
        let x = seq([2, 3, 2, 2]);
        let p = x.global_avg_pool();
        assert_eq!(p.shape(), [2, 3, 1, 1]);
        assert_eq!(p.get(0, 1, 0, 0), 5.5);
        let a = x.narrow_channels(0, 1);
        let b = x.narrow_channels(1, 2);
        assert_eq!(Tensor::concat_channels(&[&a, &b]).unwrap(), x);
    }

    #[test]
    fn flip_is_involution() {
        let x = pseudo_random([1, 2, 3, 5], 4);
        assert_ne!(x.flip_horizontal(), x);
        assert_eq!(x.flip_horizontal().flip_horizontal(), x);
    }

    proptest! {
        #[test]
        fn resize_round_trip_on_grid(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let x = pseudo_random([1, 2, h, w], seed);
            let up = x.bilinear_resize(2 * h - 1, 2 * w - 1);
            let back = up.bilinear_resize(h, w);
            prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-10);
        }

        #[test]
        fn pad_then_crop_is_identity(t in 0usize..3, b in 0usize..3, l in 0usize..3, r in 0usize..3, seed in 0u64..1000) {
            let x = pseudo_random([2, 2, 3, 4], seed);
            let pad = Pad { top: t, bottom: b, left: l, right: r };
            prop_assert_eq!(x.zero_pad(pad).crop(pad).unwrap(), x);
        }
    }
}
