//! Central finite-difference checks of every analytic backward pass.
//!
//! Each component reports `max |analytic - numeric| / max(|analytic|, |numeric|)`
//! where both maxima run over every entry of every tensor it owns (inputs and
//! parameters). Normalizing per component rather than per tensor keeps
//! structurally zero gradients, such as a conv bias feeding batch norm,
//! from turning roundoff into an O(1) ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aspp::{AsppConfig, AsppHead};
use crate::conv::{ConvLayer, Padding};
use crate::dataset::LabelMap;
use crate::error::Result;
use crate::layers::{ParamKind, Parameterized, Pass};
use crate::norm::BatchNorm;
use crate::tensor::Tensor;
use crate::train::upsampled_logits_loss;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-6;

/// Component whose analytic gradient is deliberately corrupted, for
/// checking that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Conv,
    BatchNorm,
    Aspp,
    Loss,
}

impl Fault {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "conv" => Some(Fault::Conv),
            "bn" => Some(Fault::BatchNorm),
            "aspp" => Some(Fault::Aspp),
            "loss" => Some(Fault::Loss),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `(component, worst relative error)`.
    pub components: Vec<(String, f64)>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.components.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.components.iter().all(|(_, e)| *e <= TOLERANCE)
    }
}

/// Normalized error over `(analytic, numeric)` gradient pairs.
pub fn relative_error(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let mut scale = 0.0f64;
    let mut diff = 0.0f64;
    for (analytic, numeric) in pairs {
        scale = analytic.iter().chain(numeric).fold(scale, |m, v| m.max(v.abs()));
        diff = analytic.iter().zip(numeric).fold(diff, |m, (a, n)| m.max((a - n).abs()));
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to each entry of `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let plus = f(&probe)?;
        probe[i] = x[i] - STEP;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * STEP));
    }
    Ok(out)
}

fn random_tensor<R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn corrupt(grad: &mut [f64], on: bool) {
    if on {
        grad.iter_mut().for_each(|g| *g *= 1.001);
    }
}

/// Atrous, strided convolution: input, weight and bias gradients.
pub fn check_conv(seed: u64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = ConvLayer::he_init(3, 4, 3, &mut rng)?;
    layer.rate = 2;
    layer.stride = 2;
    layer.padding = Padding::SameAtrous;
    layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let x = random_tensor([2, 3, 7, 8], &mut rng);
    let r = random_tensor(layer.forward(&x)?.shape(), &mut rng);
    let mut g = layer.backward(&x, &r)?;
    let bad = fault == Some(Fault::Conv);
    corrupt(g.grad_w.data_mut(), bad);

    let objective = |l: &ConvLayer, x: &Tensor| -> Result<f64> { l.forward(x)?.dot(&r) };
    let nx = numeric_grad(x.data(), |v| objective(&layer, &Tensor::new(x.shape(), v.to_vec())?))?;
    let nw = numeric_grad(layer.weights.data(), |v| {
        let mut l = layer.clone();
        l.weights.data_mut().copy_from_slice(v);
        objective(&l, &x)
    })?;
    let nb = numeric_grad(&layer.bias, |v| {
        let mut l = layer.clone();
        l.bias.copy_from_slice(v);
        objective(&l, &x)
    })?;
    Ok(relative_error(&[(g.grad_x.into_data(), nx), (g.grad_w.into_data(), nw), (g.grad_bias, nb)]))
}

/// Train-mode batch norm: input, gamma and beta gradients.
pub fn check_batch_norm(seed: u64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bn = BatchNorm::new(4);
    bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
    bn.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let x = random_tensor([3, 4, 3, 3], &mut rng);
    let r = random_tensor(x.shape(), &mut rng);
    let (_, cache) = bn.clone().forward_cached(&x)?;
    let (mut gx, gg, gb) = bn.backward(&cache, &r)?;
    corrupt(gx.data_mut(), fault == Some(Fault::BatchNorm));

    let objective = |b: &BatchNorm, x: &Tensor| -> Result<f64> { b.clone().forward_cached(x)?.0.dot(&r) };
    let nx = numeric_grad(x.data(), |v| objective(&bn, &Tensor::new(x.shape(), v.to_vec())?))?;
    let ng = numeric_grad(&bn.gamma, |v| {
        let mut b = bn.clone();
        b.gamma.copy_from_slice(v);
        objective(&b, &x)
    })?;
    let nb = numeric_grad(&bn.beta, |v| {
        let mut b = bn.clone();
        b.beta.copy_from_slice(v);
        objective(&b, &x)
    })?;
    Ok(relative_error(&[(gx.into_data(), nx), (gg, ng), (gb, nb)]))
}

fn trainable_names(m: &mut impl Parameterized) -> Vec<String> {
    let mut names = Vec::new();
    m.visit("", &mut |p| {
        if p.kind == ParamKind::Trainable {
            names.push(p.name);
        }
    });
    names
}

fn param_slices(m: &mut impl Parameterized, name: &str) -> (Vec<f64>, Vec<f64>) {
    let mut out = (Vec::new(), Vec::new());
    m.visit("", &mut |p| {
        if p.name == name {
            out = (p.value.to_vec(), p.grad.map(|g| g.to_vec()).unwrap_or_default());
        }
    });
    out
}

fn set_param(m: &mut impl Parameterized, name: &str, values: &[f64]) {
    m.visit("", &mut |p| {
        if p.name == name {
            p.value.copy_from_slice(values);
        }
    });
}

/// Full ASPP head (all branches incl. image pooling, fusion, classifier)
/// with train-mode batch norms: every trainable tensor and the input.
pub fn check_aspp(seed: u64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AsppConfig { base_rates: vec![1, 2, 3], branch_filters: 3, include_image_pooling: true, num_classes: 2 };
    let mut head = AsppHead::new(&cfg, 4, 16, &mut rng)?;
    head.for_each_bn(&mut |bn| {
        bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        bn.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    });
    let x = random_tensor([3, 4, 9, 9], &mut rng);
    let r = random_tensor([3, 2, 9, 9], &mut rng);

    let mut analytic = head.clone();
    analytic.zero_grad();
    analytic.forward(&x, Pass::Train)?;
    let mut gx = analytic.backward(&r)?;
    corrupt(gx.data_mut(), fault == Some(Fault::Aspp));

    let objective = |h: &AsppHead, x: &Tensor| -> Result<f64> { h.clone().forward(x, Pass::Train)?.dot(&r) };
    let nx = numeric_grad(x.data(), |v| objective(&head, &Tensor::new(x.shape(), v.to_vec())?))?;
    let mut pairs = vec![(gx.into_data(), nx)];
    for name in trainable_names(&mut head) {
        let (value, _) = param_slices(&mut head, &name);
        let (_, grad) = param_slices(&mut analytic, &name);
        let numeric = numeric_grad(&value, |v| {
            let mut h = head.clone();
            set_param(&mut h, &name, v);
            objective(&h, &x)
        })?;
        pairs.push((grad, numeric));
    }
    Ok(relative_error(&pairs))
}

/// Cross-entropy on bilinearly upsampled logits with ignored pixels.
pub fn check_loss(seed: u64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_tensor([2, 3, 3, 3], &mut rng).scale(2.0);
    let labels: Vec<LabelMap> = (0..2)
        .map(|_| {
            let data = (0..25).map(|_| if rng.random_bool(0.2) { 255 } else { rng.random_range(0..3) }).collect();
            LabelMap::new(5, 5, data)
        })
        .collect::<Result<_>>()?;
    let (_, mut grad) = upsampled_logits_loss(&logits, &labels, 255)?;
    corrupt(grad.data_mut(), fault == Some(Fault::Loss));
    let numeric = numeric_grad(logits.data(), |v| {
        Ok(upsampled_logits_loss(&Tensor::new(logits.shape(), v.to_vec())?, &labels, 255)?.0)
    })?;
    Ok(relative_error(&[(grad.into_data(), numeric)]))
}

pub fn run_all(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        components: vec![
            ("conv".into(), check_conv(seed, fault)?),
            ("bn".into(), check_batch_norm(seed, fault)?),
            ("aspp".into(), check_aspp(seed, fault)?),
            ("loss".into(), check_loss(seed, fault)?),
        ],
    })
}
