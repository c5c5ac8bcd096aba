//! Trainable building blocks shared by the backbone and the head.

use rand::Rng;

use crate::conv::ConvLayer;
use crate::error::{config_err, shape_err, Result};
use crate::norm::{BatchNorm, BnCache, BnMode};
use crate::tensor::Tensor;

/// Whether a forward pass records activations for a later backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Cache activations; Train-mode batch norms use batch moments and
    /// update their running statistics.
    Train,
    /// No caching, every batch norm uses running statistics, no mutation.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Has a gradient slot but is excluded from optimizer updates.
    Frozen,
    /// Non-gradient state such as running statistics.
    Buffer,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: Option<&'a mut [f64]>,
    pub kind: ParamKind,
}

pub type Visitor<'v> = dyn FnMut(ParamRef<'_>) + 'v;

/// Anything holding parameters or persistent state.
pub trait Parameterized {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>);

    fn zero_grad(&mut self) {
        self.visit("", &mut |p| {
            if let Some(g) = p.grad {
                g.fill(0.0);
            }
        });
    }

    fn num_trainable(&mut self) -> usize {
        let mut total = 0;
        self.visit("", &mut |p| {
            if p.kind == ParamKind::Trainable {
                total += p.value.len();
            }
        });
        total
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
struct ConvBnCache {
    input: Tensor,
    bn: BnCache,
    output: Tensor,
}

/// Convolution, batch norm and an optional rectifier.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: BatchNorm,
    pub relu: bool,
    grad_w: Tensor,
    grad_b: Vec<f64>,
    grad_gamma: Vec<f64>,
    grad_beta: Vec<f64>,
    cache: Option<ConvBnCache>,
}

impl ConvBn {
    pub fn new(conv: ConvLayer, relu: bool) -> Self {
        let c = conv.c_out();
        ConvBn {
            grad_w: Tensor::zeros(conv.weights.shape()),
            grad_b: vec![0.0; c],
            grad_gamma: vec![0.0; c],
            grad_beta: vec![0.0; c],
            bn: BatchNorm::new(c),
            conv,
            relu,
            cache: None,
        }
    }

    pub fn he_init<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, relu: bool, rng: &mut R) -> Result<Self> {
        Ok(ConvBn::new(ConvLayer::he_init(c_in, c_out, k, rng)?, relu))
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let z = self.conv.forward(x)?;
        let (mut y, bn_cache) = match pass {
            Pass::Train => {
                let (y, c) = self.bn.forward_cached(&z)?;
                (y, Some(c))
            }
            Pass::Eval => (self.bn.infer(&z)?, None),
        };
        if self.relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        self.cache = bn_cache.map(|bn| ConvBnCache { input: x.clone(), bn, output: y.clone() });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let Some(cache) = self.cache.take() else {
            return config_err("backward without a recorded forward pass");
        };
        let mut g = grad.clone();
        if self.relu {
            if g.shape() != cache.output.shape() {
                return shape_err(format!("grad {:?} vs output {:?}", g.shape(), cache.output.shape()));
            }
            for (gv, &o) in g.data_mut().iter_mut().zip(cache.output.data()) {
                if o <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let (gz, gg, gb) = self.bn.backward(&cache.bn, &g)?;
        accumulate(&mut self.grad_gamma, &gg);
        accumulate(&mut self.grad_beta, &gb);
        let cg = self.conv.backward(&cache.input, &gz)?;
        accumulate(self.grad_w.data_mut(), cg.grad_w.data());
        accumulate(&mut self.grad_b, &cg.grad_bias);
        Ok(cg.grad_x)
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn.mode = mode;
    }
}

impl Parameterized for ConvBn {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(ParamRef {
            name: join(prefix, "conv.weight"),
            value: self.conv.weights.data_mut(),
            grad: Some(self.grad_w.data_mut()),
            kind: ParamKind::Trainable,
        });
        f(ParamRef {
            name: join(prefix, "conv.bias"),
            value: &mut self.conv.bias,
            grad: Some(&mut self.grad_b),
            kind: ParamKind::Trainable,
        });
        let affine = if self.bn.is_frozen() { ParamKind::Frozen } else { ParamKind::Trainable };
        f(ParamRef {
            name: join(prefix, "bn.gamma"),
            value: &mut self.bn.gamma,
            grad: Some(&mut self.grad_gamma),
            kind: affine,
        });
        f(ParamRef {
            name: join(prefix, "bn.beta"),
            value: &mut self.bn.beta,
            grad: Some(&mut self.grad_beta),
            kind: affine,
        });
        f(ParamRef {
            name: join(prefix, "bn.running_mean"),
            value: &mut self.bn.running_mean,
            grad: None,
            kind: ParamKind::Buffer,
        });
        f(ParamRef {
            name: join(prefix, "bn.running_var"),
            value: &mut self.bn.running_var,
            grad: None,
            kind: ParamKind::Buffer,
        });
    }
}

/// Plain convolution with gradient slots (the classifier).
#[derive(Clone, Debug)]
pub struct Conv {
    pub layer: ConvLayer,
    grad_w: Tensor,
    grad_b: Vec<f64>,
    input: Option<Tensor>,
}

impl Conv {
    pub fn new(layer: ConvLayer) -> Self {
        Conv { grad_w: Tensor::zeros(layer.weights.shape()), grad_b: vec![0.0; layer.c_out()], layer, input: None }
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let y = self.layer.forward(x)?;
        self.input = (pass == Pass::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let Some(x) = self.input.take() else {
            return config_err("backward without a recorded forward pass");
        };
        let g = self.layer.backward(&x, grad)?;
        accumulate(self.grad_w.data_mut(), g.grad_w.data());
        accumulate(&mut self.grad_b, &g.grad_bias);
        Ok(g.grad_x)
    }
}

impl Parameterized for Conv {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(ParamRef {
            name: join(prefix, "weight"),
            value: self.layer.weights.data_mut(),
            grad: Some(self.grad_w.data_mut()),
            kind: ParamKind::Trainable,
        });
        f(ParamRef {
            name: join(prefix, "bias"),
            value: &mut self.layer.bias,
            grad: Some(&mut self.grad_b),
            kind: ParamKind::Trainable,
        });
    }
}

/// Max pooling with same-style padding; padded cells never win.
#[derive(Clone, Debug)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub rate: usize,
    argmax: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool {
    pub fn new(kernel: usize, stride: usize) -> Self {
        MaxPool { kernel, stride, rate: 1, argmax: None }
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if h == 0 || w == 0 {
            return config_err("zero-sized spatial input to max pool");
        }
        let (s, r) = (self.stride as isize, self.rate as isize);
        let half = (self.kernel / 2) as isize;
        let (oh, ow) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut arg = Vec::with_capacity(out.len());
        for b in 0..n {
            for ch in 0..c {
                let plane = x.plane(b, ch);
                for i in 0..oh as isize {
                    for j in 0..ow as isize {
                        let mut best = (f64::NEG_INFINITY, 0usize);
                        for ti in -half..=half {
                            let y = s * i + r * ti;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for tj in -half..=half {
                                let xx = s * j + r * tj;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let idx = y as usize * w + xx as usize;
                                if plane[idx] > best.0 {
                                    best = (plane[idx], idx);
                                }
                            }
                        }
                        out.set(b, ch, i as usize, j as usize, best.0);
                        arg.push(best.1);
                    }
                }
            }
        }
        self.argmax = (pass == Pass::Train).then_some((arg, x.shape()));
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let Some((arg, in_shape)) = self.argmax.take() else {
            return config_err("backward without a recorded forward pass");
        };
        if grad.len() != arg.len() {
            return shape_err("max pool gradient does not match its forward output");
        }
        let [n, c, oh, ow] = grad.shape();
        let mut gx = Tensor::zeros(in_shape);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * oh * ow;
                let g = grad.plane(b, ch);
                let dst = gx.plane_mut(b, ch);
                for (p, &v) in g.iter().enumerate() {
                    dst[arg[base + p]] += v;
                }
            }
        }
        Ok(gx)
    }
}

pub(crate) fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_pool_same_padding() {
        let x = Tensor::from_fn([1, 1, 5, 5], |_, _, i, j| (i * 5 + j) as f64);
        let mut pool = MaxPool::new(3, 2);
        let y = pool.forward(&x, Pass::Train).unwrap();
        assert_eq!(y.data(), &[6.0, 8.0, 9.0, 16.0, 18.0, 19.0, 21.0, 23.0, 24.0]);
        let g = pool.backward(&Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        assert_eq!(g.sum(), 9.0);
        assert_eq!(g.get(0, 0, 4, 4), 1.0);
    }

    #[test]
    fn backward_requires_train_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut unit = ConvBn::he_init(2, 3, 3, true, &mut rng).unwrap();
        let x = Tensor::full([2, 2, 3, 3], 1.0);
        unit.forward(&x, Pass::Eval).unwrap();
        assert!(unit.backward(&Tensor::zeros([2, 3, 3, 3])).is_err());
    }

    #[test]
    fn frozen_affine_reported_as_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut unit = ConvBn::he_init(2, 3, 1, false, &mut rng).unwrap();
        let mut kinds = Vec::new();
        unit.bn.freeze();
        unit.visit("u", &mut |p| kinds.push((p.name, p.kind)));
        assert_eq!(kinds[2], ("u.bn.gamma".to_string(), ParamKind::Frozen));
        assert_eq!(kinds[4].1, ParamKind::Buffer);
        assert_eq!(unit.num_trainable(), 2 * 3 + 3);
    }
}
