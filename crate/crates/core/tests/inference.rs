mod common;

use atrous::eval::{aligned_size, argmax_labels, predict_probs, softmax_channels, InferenceConfig};
use atrous::layers::Pass;
use atrous::Tensor;
use common::{frozen_model, random_image};
use proptest::prelude::*;

fn single(os: usize) -> InferenceConfig {
    InferenceConfig { eval_os: os, scales: vec![1.0], flip: false }
}

#[test]
fn single_scale_is_softmax_of_resized_logits() {
    let mut model = frozen_model(0, true, 16, 1);
    let x = random_image(33, 41, 2);
    let probs = predict_probs(&mut model, &x, &single(8)).unwrap();
    let logits = model.forward(&x, Pass::Eval).unwrap();
    let oracle = softmax_channels(&logits.bilinear_resize(33, 41));
    assert_eq!(probs, oracle);
    assert_eq!(model.output_stride(), 8);
}

#[test]
fn flip_averages_with_mirrored_run() {
    let mut model = frozen_model(0, true, 16, 3);
    let x = random_image(33, 33, 4);
    let plain = predict_probs(&mut model, &x, &single(16)).unwrap();
    let mirrored = predict_probs(&mut model, &x.flip_horizontal(), &single(16)).unwrap().flip_horizontal();
    let cfg = InferenceConfig { flip: true, ..single(16) };
    let both = predict_probs(&mut model, &x, &cfg).unwrap();
    let oracle = plain.add(&mirrored).unwrap().scale(0.5);
    assert!(both.max_abs_diff(&oracle).unwrap() < 1e-15);
}

#[test]
fn multi_scale_averages_each_scale() {
    let mut model = frozen_model(0, false, 8, 5);
    let x = random_image(33, 33, 6);
    let scales = [0.5, 1.25];
    let mut oracle = Tensor::zeros([1, 3, 33, 33]);
    for s in scales {
        let side = aligned_size(33, s, 8).unwrap();
        let logits = model.forward(&x.bilinear_resize(side, side), Pass::Eval).unwrap();
        oracle.add_assign(&softmax_channels(&logits.bilinear_resize(33, 33)).scale(0.5)).unwrap();
    }
    let cfg = InferenceConfig { eval_os: 8, scales: scales.to_vec(), flip: false };
    let probs = predict_probs(&mut model, &x, &cfg).unwrap();
    assert!(probs.max_abs_diff(&oracle).unwrap() < 1e-15);
}

#[test]
fn rejects_batches_and_bad_scales() {
    let mut model = frozen_model(0, true, 16, 7);
    let batch = Tensor::zeros([2, 3, 17, 17]);
    assert!(predict_probs(&mut model, &batch, &single(16)).is_err());
    let x = random_image(17, 17, 8);
    let cfg = InferenceConfig { eval_os: 16, scales: vec![-1.0], flip: false };
    assert!(predict_probs(&mut model, &x, &cfg).is_err());
    let cfg = InferenceConfig { eval_os: 16, scales: vec![], flip: false };
    assert!(predict_probs(&mut model, &x, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn probabilities_form_a_distribution(
        h in 9usize..40,
        w in 9usize..40,
        scale in prop::sample::select(vec![0.5, 0.75, 1.0, 1.5]),
        flip in any::<bool>(),
        seed in 0u64..100,
    ) {
        let mut model = frozen_model(0, true, 16, seed);
        let x = random_image(h, w, seed + 1);
        let cfg = InferenceConfig { eval_os: 8, scales: vec![scale], flip };
        let probs = predict_probs(&mut model, &x, &cfg).unwrap();
        prop_assert_eq!(probs.shape(), [1, 3, h, w]);
        for p in 0..h * w {
            let total: f64 = (0..3).map(|c| probs.sample(0)[c * h * w + p]).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        let labels = argmax_labels(&probs);
        prop_assert!(labels.data.iter().all(|&l| l < 3));
    }
}
