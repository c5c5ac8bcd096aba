mod common;

use atrous::layers::Pass;
use common::{frozen_model, random_image};

/// Atrous convolution recovers every other OS16 response on the denser OS8
/// grid: subsampling the OS8 logits by 2 gives the OS16 logits.
fn max_gap(extra_blocks: usize, image_pooling: bool, seed: u64) -> f64 {
    let mut model = frozen_model(extra_blocks, image_pooling, 16, seed);
    let x = random_image(65, 65, seed + 100);
    let coarse = model.forward(&x, Pass::Eval).unwrap();
    model.set_output_stride(8).unwrap();
    let dense = model.forward(&x, Pass::Eval).unwrap();
    assert_eq!((coarse.h(), dense.h()), (5, 9));
    dense.subsample(2).max_abs_diff(&coarse).unwrap()
}

#[test]
fn os8_subsampled_equals_os16() {
    for seed in 0..3 {
        let gap = max_gap(0, false, seed);
        assert!(gap <= 1e-8, "seed {seed}: {gap}");
    }
}

#[test]
fn holds_through_cascaded_blocks() {
    let gap = max_gap(2, false, 4);
    assert!(gap <= 1e-8, "{gap}");
}

#[test]
fn image_pooling_breaks_exact_equivalence() {
    // the global mean over the 9x9 grid differs from the mean over its 5x5 subgrid
    assert!(max_gap(0, true, 5) > 1e-6);
}

#[test]
fn switching_stride_keeps_weights() {
    let mut model = frozen_model(0, true, 16, 6);
    let before = model.state();
    model.set_output_stride(8).unwrap();
    model.set_output_stride(16).unwrap();
    assert_eq!(model.state(), before);
    assert_eq!(model.head.rates(), vec![1, 2, 3]);
    model.set_output_stride(8).unwrap();
    assert_eq!(model.head.rates(), vec![2, 4, 6]);
}
