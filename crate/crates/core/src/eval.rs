//! Inference strategies and the mean-IOU metric.

use crate::dataset::{LabelMap, Sample};
use crate::error::{config_err, shape_err, Result};
use crate::layers::Pass;
use crate::model::SegmentationModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub eval_os: usize,
    pub scales: Vec<f64>,
    /// Also run on the mirrored image and mirror the result back.
    pub flip: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { eval_os: 8, scales: Self::MULTI_SCALE.to_vec(), flip: false }
    }
}

impl InferenceConfig {
    pub const MULTI_SCALE: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return config_err("inference scales must be a nonempty list of positive numbers");
        }
        if self.eval_os == 0 || !self.eval_os.is_power_of_two() {
            return config_err(format!("eval output stride {} is not a power of two", self.eval_os));
        }
        Ok(())
    }
}

/// Nearest size of the form `k*os + 1` to `len * scale` (ties round up).
pub fn aligned_size(len: usize, scale: f64, os: usize) -> Result<usize> {
    let target = (len as f64 * scale).round();
    if target < 1.0 {
        return config_err(format!("scale {scale} shrinks a {len}-pixel side below one pixel"));
    }
    let k = ((target - 1.0) / os as f64).round() as usize;
    Ok(k * os + 1)
}

/// Softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = logits.clone();
    for b in 0..n {
        let s = out.sample_mut(b);
        for p in 0..hw {
            let max = (0..c).map(|k| s[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..c {
                let e = (s[k * hw + p] - max).exp();
                s[k * hw + p] = e;
                sum += e;
            }
            for k in 0..c {
                s[k * hw + p] /= sum;
            }
        }
    }
    out
}

/// Averaged class probabilities at the input resolution for a (1, 3, h, w)
/// image. Each run's logits are resized to the input size before softmax;
/// runs are averaged in probability space.
pub fn predict_probs(model: &mut SegmentationModel, image: &Tensor, cfg: &InferenceConfig) -> Result<Tensor> {
    cfg.validate()?;
    if image.n() != 1 {
        return shape_err("predict_probs takes a single image");
    }
    model.set_output_stride(cfg.eval_os)?;
    let (h, w) = (image.h(), image.w());
    let mut acc = Tensor::zeros([1, model.num_classes(), h, w]);
    let mut runs = 0;
    for &scale in &cfg.scales {
        let (sh, sw) = (aligned_size(h, scale, cfg.eval_os)?, aligned_size(w, scale, cfg.eval_os)?);
        let scaled = image.bilinear_resize(sh, sw);
        let flips: &[bool] = if cfg.flip { &[false, true] } else { &[false] };
        for &flip in flips {
            let input = if flip { scaled.flip_horizontal() } else { scaled.clone() };
            let logits = model.forward(&input, Pass::Eval)?;
            let mut probs = softmax_channels(&logits.bilinear_resize(h, w));
            if flip {
                probs = probs.flip_horizontal();
            }
            acc.add_assign(&probs)?;
            runs += 1;
        }
    }
    Ok(acc.scale(1.0 / runs as f64))
}

/// Per-pixel argmax of a (1, C, h, w) tensor; the lowest index wins ties.
pub fn argmax_labels(probs: &Tensor) -> LabelMap {
    let [_, c, h, w] = probs.shape();
    let hw = h * w;
    let s = probs.sample(0);
    let data = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if s[k * hw + p] > s[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap { h, w, data }
}

/// What to do with classes whose IOU denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbsentClass {
    Exclude,
    CountAsZero,
    CountAsOne,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row-major, rows are groundtruth, columns predictions.
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both groundtruth and predictions.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_label: u8) -> Result<()> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return shape_err("prediction and groundtruth differ in size");
        }
        let c = self.num_classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == ignore_label {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= c || g >= c {
                return config_err(format!("label pair ({g}, {p}) out of range for {c} classes"));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return shape_err("confusion matrices differ in class count");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn mean_iou(&self) -> Result<IouReport> {
        self.mean_iou_with(AbsentClass::Exclude)
    }

    pub fn mean_iou_with(&self, absent: AbsentClass) -> Result<IouReport> {
        if self.total() == 0 {
            return config_err("confusion matrix is empty");
        }
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let inter = self.get(k, k);
                let union = row + col - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect();
        let scored: Vec<f64> = per_class
            .iter()
            .filter_map(|v| match (v, absent) {
                (Some(v), _) => Some(*v),
                (None, AbsentClass::Exclude) => None,
                (None, AbsentClass::CountAsZero) => Some(0.0),
                (None, AbsentClass::CountAsOne) => Some(1.0),
            })
            .collect();
        let mean = scored.iter().sum::<f64>() / scored.len() as f64;
        Ok(IouReport { per_class, mean })
    }
}

impl IouReport {
    /// `class,name,iou` rows (empty iou for absent classes) then `mean,,x`.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut out = String::from("class,name,iou\n");
        for (k, v) in self.per_class.iter().enumerate() {
            let name = names.get(k).copied().unwrap_or("");
            let v = v.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{k},{name},{v}\n"));
        }
        out.push_str(&format!("mean,,{}\n", self.mean));
        out
    }
}

/// Scores every sample; `on_prediction` sees each predicted label map.
pub fn evaluate_with(
    model: &mut SegmentationModel,
    samples: &[Sample],
    cfg: &InferenceConfig,
    ignore_label: u8,
    mut on_prediction: impl FnMut(usize, &LabelMap) -> Result<()>,
) -> Result<ConfusionMatrix> {
    let restore = model.output_stride();
    let mut conf = ConfusionMatrix::new(model.num_classes());
    for (i, s) in samples.iter().enumerate() {
        let pred = argmax_labels(&predict_probs(model, &s.image, cfg)?);
        conf.accumulate(&pred, &s.label, ignore_label)?;
        on_prediction(i, &pred)?;
    }
    model.set_output_stride(restore)?;
    Ok(conf)
}

/// Confusion matrix over `samples` plus the number of samples scored.
pub fn evaluate(
    model: &mut SegmentationModel,
    samples: &[Sample],
    cfg: &InferenceConfig,
    ignore_label: u8,
) -> Result<(ConfusionMatrix, usize)> {
    let conf = evaluate_with(model, samples, cfg, ignore_label, |_, _| Ok(()))?;
    Ok((conf, samples.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conf(counts: &[u64]) -> ConfusionMatrix {
        let c = (counts.len() as f64).sqrt() as usize;
        ConfusionMatrix { num_classes: c, counts: counts.to_vec() }
    }

    #[test]
    fn hand_case_iou() {
        let r = conf(&[3, 1, 2, 4]).mean_iou().unwrap();
        assert!((r.per_class[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((r.per_class[1].unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((r.mean - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
        assert!((r.mean - 0.535714).abs() < 1e-6);
    }

    #[test]
    fn absent_class_policies() {
        let m = conf(&[5, 0, 0, 0, 0, 0, 0, 0, 3]);
        assert_eq!(m.mean_iou().unwrap().per_class[1], None);
        assert_eq!(m.mean_iou().unwrap().mean, 1.0);
        assert_eq!(m.mean_iou_with(AbsentClass::CountAsZero).unwrap().mean, 2.0 / 3.0);
        assert_eq!(m.mean_iou_with(AbsentClass::CountAsOne).unwrap().mean, 1.0);
        assert!(ConfusionMatrix::new(3).mean_iou().is_err());
    }

    #[test]
    fn accumulate_hand_tally() {
        let gt = LabelMap::new(3, 3, vec![0, 0, 1, 1, 1, 255, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(3, 3, vec![0, 1, 1, 0, 1, 1, 0, 1, 0]).unwrap();
        let mut m = ConfusionMatrix::new(2);
        m.accumulate(&pred, &gt, 255).unwrap();
        // gt0: preds 0,1,0 ; gt1: preds 1,0,1,1,0
        assert_eq!(m.counts, vec![2, 1, 2, 3]);
        assert_eq!(m.total(), 8);
        let all_ignored = LabelMap::filled(3, 3, 255);
        m.accumulate(&pred, &all_ignored, 255).unwrap();
        assert_eq!(m.total(), 8);
        assert!(m.accumulate(&LabelMap::filled(3, 3, 2), &gt, 255).is_err());
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&gt, &gt, 255).unwrap();
        assert_eq!(m.counts, vec![2, 0, 0, 0, 2, 0, 0, 0, 2]);
        assert_eq!(m.mean_iou().unwrap().mean, 1.0);
    }

    #[test]
    fn aligned_sizes() {
        assert_eq!(aligned_size(65, 1.0, 8).unwrap(), 65);
        assert_eq!(aligned_size(65, 0.5, 8).unwrap(), 33);
        assert_eq!(aligned_size(65, 0.75, 8).unwrap(), 49);
        assert_eq!(aligned_size(65, 1.25, 16).unwrap(), 81);
        assert_eq!(aligned_size(3, 0.2, 8).unwrap(), 1);
        assert!(aligned_size(3, 0.1, 8).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_fn([2, 4, 3, 3], |n, c, y, x| ((n * 7 + c * 5 + y * 3 + x) % 11) as f64 - 5.0);
        let p = softmax_channels(&t);
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let s: f64 = (0..4).map(|c| p.get(n, c, y, x)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn csv_report_lists_every_class() {
        let r = conf(&[5, 0, 0, 0, 0, 0, 0, 0, 3]).mean_iou().unwrap();
        let csv = r.to_csv(&["a", "b", "c"]);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("1,b,\n"));
        assert!(csv.ends_with(&format!("mean,,{}\n", r.mean)));
    }
}
