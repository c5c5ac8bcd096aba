//! Training protocol: poly learning rate, scale/crop/flip augmentation,
//! loss on upsampled logits, staged output stride and BN schedule, and
//! hard-image bootstrapping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{LabelMap, Manifest, Sample, IGNORE_LABEL};
use crate::error::{config_err, shape_err, Error, Result};
use crate::eval::{evaluate, InferenceConfig};
use crate::layers::{ParamKind, Parameterized, Pass};
use crate::model::SegmentationModel;
use crate::norm::{BnMode, DEFAULT_DECAY};
use crate::tensor::Tensor;

/// One phase of the schedule, with its own poly decay from `base_lr` to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub output_stride: usize,
    pub bn_mode: BnMode,
    pub base_lr: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub batch_size: usize,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Running-statistics decay applied to every batch norm before training.
    pub bn_decay: f64,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub ignore_label: u8,
    /// Compute the loss on logits resized to the label resolution; when
    /// false, labels are instead downsampled to the logit resolution.
    pub upsample_logits: bool,
    pub stages: Vec<Stage>,
    pub hard_classes: Vec<u8>,
    pub bootstrap_factor: usize,
    /// Evaluate on the validation set every this many iterations (0: only
    /// at the end of each stage).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop_size: 65,
            batch_size: 8,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0,
            bn_decay: DEFAULT_DECAY,
            scale_range: (0.5, 2.0),
            flip_prob: 0.5,
            ignore_label: IGNORE_LABEL,
            upsample_logits: true,
            stages: vec![
                Stage { output_stride: 16, bn_mode: BnMode::Train, base_lr: 0.007, iterations: 1500 },
                Stage { output_stride: 8, bn_mode: BnMode::Frozen, base_lr: 0.001, iterations: 1500 },
            ],
            hard_classes: Vec::new(),
            bootstrap_factor: 1,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.batch_size == 0 {
            return config_err("crop size and batch size must be positive");
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.output_stride == 0 || !(self.crop_size - 1).is_multiple_of(s.output_stride) {
                return config_err(format!(
                    "stage {}: crop size {} is not of the form N*{}+1",
                    i + 1,
                    self.crop_size,
                    s.output_stride
                ));
            }
            if !(s.base_lr >= 0.0 && s.base_lr.is_finite()) {
                return config_err(format!("stage {}: learning rate must be finite and nonnegative", i + 1));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return config_err(format!("invalid scale range [{lo}, {hi}]"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return config_err("flip probability must lie in [0, 1]");
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return config_err("poly power must be positive");
        }
        if !(0.0..1.0).contains(&self.bn_decay) {
            return config_err("batch norm decay must lie in [0, 1)");
        }
        if self.bootstrap_factor == 0 {
            return config_err("bootstrap factor must be at least 1");
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return config_err("poly schedule needs max_iter > 0");
    }
    if iter > max_iter {
        return config_err(format!("iteration {iter} is past max_iter {max_iter}"));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Random scale, crop and flip. Draw order: scale, crop row offset, crop
/// column offset, flip. Inputs smaller than the crop are padded at the
/// bottom and right (image with `fill`, label with the ignore label).
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor,
    label: &LabelMap,
    cfg: &TrainConfig,
    fill: [f64; 3],
    rng: &mut R,
) -> Result<(Tensor, LabelMap)> {
    if image.n() != 1 || image.h() != label.h || image.w() != label.w {
        return shape_err("image and label map are not aligned");
    }
    let (lo, hi) = cfg.scale_range;
    let scale = lo + (hi - lo) * rng.random::<f64>();
    let sh = ((label.h as f64 * scale).round() as usize).max(1);
    let sw = ((label.w as f64 * scale).round() as usize).max(1);
    let (image, label) = if (sh, sw) == (label.h, label.w) {
        (image.clone(), label.clone())
    } else {
        (image.bilinear_resize(sh, sw), label.resize_nearest(sh, sw))
    };

    let crop = cfg.crop_size;
    let (ph, pw) = (sh.max(crop), sw.max(crop));
    let image = pad_bottom_right(&image, ph, pw, fill);
    let label = label.pad_to(ph, pw, cfg.ignore_label);

    let y0 = rng.random_range(0..=ph - crop);
    let x0 = rng.random_range(0..=pw - crop);
    let mut image = image.window(y0, x0, crop, crop);
    let mut label = label.window(y0, x0, crop, crop);

    if rng.random::<f64>() < cfg.flip_prob {
        image = image.flip_horizontal();
        label = label.flip_horizontal();
    }
    Ok((image, label))
}

fn pad_bottom_right(x: &Tensor, h: usize, w: usize, fill: [f64; 3]) -> Tensor {
    if (x.h(), x.w()) == (h, w) {
        return x.clone();
    }
    let (xh, xw) = (x.h(), x.w());
    Tensor::from_fn(
        [x.n(), x.c(), h, w],
        |n, c, y, i| {
            if y < xh && i < xw {
                x.get(n, c, y, i)
            } else {
                fill[c.min(2)]
            }
        },
    )
}

/// Mean softmax cross-entropy over non-ignored pixels and its gradient
/// with respect to `logits`. Logits and labels share a resolution.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[LabelMap], ignore_label: u8) -> Result<(f64, Tensor)> {
    let [n, c, h, w] = logits.shape();
    if labels.len() != n || labels.iter().any(|l| (l.h, l.w) != (h, w)) {
        return shape_err(format!("labels do not match logits of shape {:?}", logits.shape()));
    }
    let hw = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut probs = vec![0.0; c];
    for (b, label) in labels.iter().enumerate() {
        let z = logits.sample(b);
        let g = grad.sample_mut(b);
        for (p, &y) in label.data.iter().enumerate() {
            if y == ignore_label {
                continue;
            }
            let y = y as usize;
            if y >= c {
                return config_err(format!("label {y} is out of range for {c} classes"));
            }
            let max = (0..c).map(|k| z[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, pk) in probs.iter_mut().enumerate() {
                *pk = (z[k * hw + p] - max).exp();
                sum += *pk;
            }
            total += sum.ln() + max - z[y * hw + p];
            for (k, pk) in probs.iter().enumerate() {
                g[k * hw + p] = pk / sum;
            }
            g[y * hw + p] -= 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return config_err("every pixel is ignored");
    }
    let inv = 1.0 / count as f64;
    Ok((total * inv, grad.scale(inv)))
}

/// Cross-entropy after bilinearly resizing logits to the label resolution;
/// the gradient is mapped back through the resize.
pub fn upsampled_logits_loss(logits: &Tensor, labels: &[LabelMap], ignore_label: u8) -> Result<(f64, Tensor)> {
    let Some(first) = labels.first() else {
        return shape_err("empty label batch");
    };
    let (h, w) = (first.h, first.w);
    let up = logits.bilinear_resize(h, w);
    let (loss, grad_up) = softmax_cross_entropy(&up, labels, ignore_label)?;
    Ok((loss, grad_up.bilinear_resize_backward(logits.h(), logits.w())))
}

/// The ablation: nearest-downsample labels to the logit grid instead.
pub fn downsampled_labels_loss(logits: &Tensor, labels: &[LabelMap], ignore_label: u8) -> Result<(f64, Tensor)> {
    let small: Vec<LabelMap> = labels.iter().map(|l| l.resize_nearest(logits.h(), logits.w())).collect();
    softmax_cross_entropy(logits, &small, ignore_label)
}

/// How many times each sample is visited per epoch.
pub fn bootstrap_counts(classes: &[Vec<u8>], hard_classes: &[u8], factor: usize) -> Vec<usize> {
    classes.iter().map(|cs| if cs.iter().any(|c| hard_classes.contains(c)) { factor } else { 1 }).collect()
}

/// Repeats every entry containing a hard class `factor` times in place.
pub fn bootstrap_manifest(manifest: &Manifest, hard_classes: &[u8], factor: usize) -> Manifest {
    let classes: Vec<Vec<u8>> = manifest.entries.iter().map(|e| e.classes.clone()).collect();
    let counts = bootstrap_counts(&classes, hard_classes, factor);
    let entries = manifest.entries.iter().zip(counts).flat_map(|(e, k)| std::iter::repeat_n(e.clone(), k)).collect();
    Manifest { root: manifest.root.clone(), entries }
}

/// SGD with momentum: `v = m*v + g + wd*w`, `w -= lr*v`. Velocities are
/// keyed by parameter name so freezing layers between stages is harmless.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut impl Parameterized, lr: f64) {
        let (m, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit("", &mut |p| {
            let (ParamKind::Trainable, Some(grad)) = (p.kind, p.grad) else {
                return;
            };
            let v = velocity.entry(p.name).or_insert_with(|| vec![0.0; grad.len()]);
            for ((w, g), v) in p.value.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
                *v = m * *v + g + wd * *w;
                *w -= lr * *v;
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// 1-based count of completed updates.
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_miou: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iter,lr,loss,val_miou";

    pub fn to_csv(&self) -> String {
        let miou = self.val_miou.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.iter, self.lr, self.loss, miou)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub optimizer: Sgd,
    pub iterations: usize,
    /// Validation mIOU after the final stage, if a validation set was given.
    pub final_miou: Option<f64>,
}

/// Everything the loop needs besides the model.
pub struct TrainData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    /// Image padding value, normally the training set's channel mean.
    pub fill: [f64; 3],
}

/// Runs every stage in order. All randomness (epoch shuffles and
/// augmentation) comes from one ChaCha8 stream seeded with `seed`.
pub fn run_training(
    model: &mut SegmentationModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_log: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let classes: Vec<Vec<u8>> = data.train.iter().map(|s| s.label.present_classes()).collect();
    let pool: Vec<usize> = bootstrap_counts(&classes, &cfg.hard_classes, cfg.bootstrap_factor)
        .into_iter()
        .enumerate()
        .flat_map(|(i, k)| std::iter::repeat_n(i, k))
        .collect();
    if pool.is_empty() && cfg.total_iterations() > 0 {
        return config_err("training set is empty");
    }

    model.set_bn_decay(cfg.bn_decay);
    let mut optimizer = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut iter = 0;
    let mut final_miou = None;
    let infer_for = |os| InferenceConfig { eval_os: os, scales: vec![1.0], flip: false };

    for (si, stage) in cfg.stages.iter().enumerate() {
        model.set_output_stride(stage.output_stride)?;
        model.set_bn_mode(stage.bn_mode);
        for k in 0..stage.iterations {
            let lr = poly_lr(k, stage.iterations, stage.base_lr, cfg.power)?;
            let mut images = Vec::with_capacity(cfg.batch_size);
            let mut labels = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order.clone_from(&pool);
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let s = &data.train[order[cursor]];
                cursor += 1;
                let (img, lab) = augment(&s.image, &s.label, cfg, data.fill, &mut rng)?;
                images.push(img);
                labels.push(lab);
            }
            let batch = stack(&images)?;

            model.zero_grad();
            let logits = model.forward(&batch, Pass::Train)?;
            let (loss, grad) = if cfg.upsample_logits {
                upsampled_logits_loss(&logits, &labels, cfg.ignore_label)?
            } else {
                downsampled_labels_loss(&logits, &labels, cfg.ignore_label)?
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {loss} at iteration {} (stage {}, lr {lr})",
                    iter + 1,
                    si + 1
                )));
            }
            model.backward(&grad)?;
            optimizer.step(model, lr);
            iter += 1;

            let stage_end = k + 1 == stage.iterations;
            let periodic = cfg.eval_interval > 0 && iter % cfg.eval_interval == 0;
            let val_miou = if !data.val.is_empty() && (stage_end || periodic) {
                let (conf, _) = evaluate(model, data.val, &infer_for(stage.output_stride), cfg.ignore_label)?;
                Some(conf.mean_iou()?.mean)
            } else {
                None
            };
            let row = LogRow { iter, lr, loss, val_miou };
            on_log(&row);
            log.push(row);
            if stage_end && si + 1 == cfg.stages.len() {
                final_miou = val_miou;
            }
        }
    }
    Ok(TrainOutcome { log, optimizer, iterations: iter, final_miou })
}

/// Concatenates single-sample tensors along the batch axis.
pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return shape_err("cannot stack an empty batch");
    };
    let [_, c, h, w] = first.shape();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.shape() != [1, c, h, w] {
            return shape_err(format!("batch member {:?} differs from {:?}", s.shape(), first.shape()));
        }
        data.extend_from_slice(s.data());
    }
    Tensor::new([samples.len(), c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ManifestEntry;

    #[test]
    fn poly_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 0.007, 0.9).unwrap(), 0.007);
        assert_eq!(poly_lr(100, 100, 0.007, 0.9).unwrap(), 0.0);
        let mid = poly_lr(50, 100, 0.007, 0.9).unwrap();
        // 0.5^0.9 = exp(-0.9 ln 2)
        let oracle = 0.007 * (-0.9 * std::f64::consts::LN_2).exp();
        assert!((mid - oracle).abs() < 1e-15);
        // 40-digit decimal evaluation
        assert!((mid - 0.003_751_207_118_877_026).abs() < 1e-15);
        assert!(poly_lr(101, 100, 0.007, 0.9).is_err());
        assert!(poly_lr(0, 0, 0.007, 0.9).is_err());
    }

    #[test]
    fn poly_strictly_decreasing() {
        let lrs: Vec<f64> = (0..=50).map(|i| poly_lr(i, 50, 0.01, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    fn ramp_sample(h: usize, w: usize) -> (Tensor, LabelMap) {
        let image = Tensor::from_fn([1, 3, h, w], |_, c, y, x| (c * 100 + y * w + x) as f64 / 1000.0);
        let label = LabelMap::new(h, w, (0..h * w).map(|v| (v % 5) as u8).collect()).unwrap();
        (image, label)
    }

    #[test]
    fn augment_identity_when_disabled() {
        let cfg = TrainConfig { scale_range: (1.0, 1.0), flip_prob: 0.0, crop_size: 9, ..TrainConfig::default() };
        let (image, label) = ramp_sample(9, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (i2, l2) = augment(&image, &label, &cfg, [0.0; 3], &mut rng).unwrap();
        assert_eq!(i2.data(), image.data());
        assert_eq!(l2, label);
    }

    #[test]
    fn augment_always_flips_at_probability_one() {
        let cfg = TrainConfig { scale_range: (1.0, 1.0), flip_prob: 1.0, crop_size: 9, ..TrainConfig::default() };
        let (image, label) = ramp_sample(9, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (i2, l2) = augment(&image, &label, &cfg, [0.0; 3], &mut rng).unwrap();
        assert_eq!(i2.flip_horizontal().data(), image.data());
        assert_eq!(l2.flip_horizontal(), label);
    }

    #[test]
    fn small_input_is_padded_with_ignore_and_mean() {
        let cfg = TrainConfig { scale_range: (0.5, 0.5), flip_prob: 0.0, crop_size: 65, ..TrainConfig::default() };
        let (image, label) = ramp_sample(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fill = [0.1, 0.2, 0.3];
        let (i2, l2) = augment(&image, &label, &cfg, fill, &mut rng).unwrap();
        assert_eq!((l2.h, l2.w), (65, 65));
        let ignored = l2.data.iter().filter(|&&v| v == IGNORE_LABEL).count();
        assert_eq!(ignored, 65 * 65 - 5 * 5);
        assert!((5..65).all(|y| l2.get(y, 0) == IGNORE_LABEL && l2.get(0, y) == IGNORE_LABEL));
        assert_eq!(i2.get(0, 2, 64, 64), 0.3);
        assert_eq!(i2.get(0, 0, 0, 5), 0.1);
    }

    #[test]
    fn augment_keeps_label_alphabet() {
        let cfg = TrainConfig { crop_size: 17, ..TrainConfig::default() };
        let (image, label) = ramp_sample(20, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (_, l2) = augment(&image, &label, &cfg, [0.5; 3], &mut rng).unwrap();
            assert!(l2.data.iter().all(|&v| v < 5 || v == IGNORE_LABEL));
        }
    }

    #[test]
    fn loss_softmax_identities() {
        let label = LabelMap::new(1, 1, vec![1]).unwrap();
        let uniform = Tensor::zeros([1, 4, 1, 1]);
        let (loss, _) = softmax_cross_entropy(&uniform, std::slice::from_ref(&label), 255).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        let confident = Tensor::from_fn([1, 4, 1, 1], |_, c, _, _| if c == 1 { 60.0 } else { 0.0 });
        let (loss, _) = softmax_cross_entropy(&confident, &[label], 255).unwrap();
        assert!(loss < 1e-25);
    }

    #[test]
    fn loss_depends_only_on_scored_pixels() {
        let label = LabelMap::new(2, 2, vec![255, 1, 255, 255]).unwrap();
        let a = Tensor::from_fn([1, 2, 2, 2], |_, c, y, x| (c + 3 * y + 5 * x) as f64 * 0.3);
        let mut b = a.clone();
        b.set(0, 0, 0, 0, -7.0);
        b.set(0, 1, 1, 1, 9.0);
        let (la, ga) = softmax_cross_entropy(&a, std::slice::from_ref(&label), 255).unwrap();
        let (lb, gb) = softmax_cross_entropy(&b, &[label], 255).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga.data(), gb.data());
        assert_eq!(ga.get(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn loss_errors() {
        let l = LabelMap::new(1, 2, vec![255, 255]).unwrap();
        assert!(softmax_cross_entropy(&Tensor::zeros([1, 2, 1, 2]), &[l], 255).is_err());
        let l = LabelMap::new(1, 2, vec![0, 2]).unwrap();
        assert!(softmax_cross_entropy(&Tensor::zeros([1, 2, 1, 2]), &[l], 255).is_err());
    }

    #[test]
    fn upsampled_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::from_fn([1, 3, 3, 3], |_, _, _, _| rng.random_range(-2.0..2.0));
        let data = (0..25).map(|i| if i % 7 == 3 { 255 } else { rng.random_range(0..3) }).collect();
        let labels = vec![LabelMap::new(5, 5, data).unwrap()];
        let (_, grad) = upsampled_logits_loss(&logits, &labels, 255).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += eps;
            let mut m = logits.clone();
            m.data_mut()[i] -= eps;
            let fd = (upsampled_logits_loss(&p, &labels, 255).unwrap().0
                - upsampled_logits_loss(&m, &labels, 255).unwrap().0)
                / (2.0 * eps);
            worst = worst.max((fd - grad.data()[i]).abs());
        }
        assert!(worst / grad.max_abs() < 1e-6, "relative error {}", worst / grad.max_abs());
    }

    fn manifest(classes: &[&[u8]]) -> Manifest {
        let entries = classes
            .iter()
            .enumerate()
            .map(|(i, c)| ManifestEntry {
                image: format!("{i}.ppm").into(),
                label: format!("{i}.pgm").into(),
                classes: c.to_vec(),
            })
            .collect();
        Manifest { root: "".into(), entries }
    }

    #[test]
    fn bootstrap_duplicates_hard_images() {
        let m = manifest(&[&[0], &[0, 4], &[1], &[4], &[2], &[0, 3], &[0], &[0, 1, 4], &[5], &[0]]);
        assert_eq!(bootstrap_manifest(&m, &[4], 1), m);
        let b = bootstrap_manifest(&m, &[4], 3);
        assert_eq!(b.len(), 16);
        let hard = |m: &Manifest| m.entries.iter().filter(|e| e.classes.contains(&4)).count();
        assert_eq!(hard(&b), 3 * hard(&m));
    }

    #[test]
    fn sgd_momentum_update() {
        use crate::conv::{ConvLayer, Padding};
        use crate::layers::Conv;
        let layer = ConvLayer::new(Tensor::full([1, 1, 1, 1], 1.0), vec![0.0], 1, 1, Padding::SameAtrous).unwrap();
        let mut conv = Conv::new(layer);
        let x = Tensor::full([1, 1, 1, 1], 2.0);
        let mut sgd = Sgd::new(0.9, 0.0);
        for _ in 0..2 {
            conv.zero_grad();
            conv.forward(&x, Pass::Train).unwrap();
            conv.backward(&Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
            sgd.step(&mut conv, 0.1);
        }
        // grad is 2 both times: v1 = 2, v2 = 0.9*2 + 2
        let w = conv.layer.weights.data()[0];
        assert!((w - (1.0 - 0.1 * 2.0 - 0.1 * 3.8)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { crop_size: 64, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { scale_range: (2.0, 0.5), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { flip_prob: 1.5, ..TrainConfig::default() }.validate().is_err());
    }
}
