#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atrous::aspp::AsppConfig;
use atrous::backbone::NetworkSpec;
use atrous::model::SegmentationModel;
use atrous::norm::BnMode;
use atrous::Tensor;

pub fn tiny_aspp(image_pooling: bool) -> AsppConfig {
    AsppConfig { base_rates: vec![1, 2, 3], branch_filters: 6, include_image_pooling: image_pooling, num_classes: 3 }
}

pub fn tiny_network(extra_blocks: usize) -> NetworkSpec {
    NetworkSpec::miniature(4, [4, 6, 6, 8], [1, 2, 4], extra_blocks).unwrap()
}

/// Tiny model with frozen batch norms whose statistics and affine
/// parameters are random, so no layer reduces to an identity.
pub fn frozen_model(extra_blocks: usize, image_pooling: bool, os: usize, seed: u64) -> SegmentationModel {
    let mut model =
        SegmentationModel::from_seed(&tiny_network(extra_blocks), &tiny_aspp(image_pooling), os, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut randomize = |bn: &mut atrous::norm::BatchNorm| {
        for c in 0..bn.channels() {
            bn.gamma[c] = rng.random_range(0.5..1.5);
            bn.beta[c] = rng.random_range(-0.2..0.2);
            bn.running_mean[c] = rng.random_range(-0.3..0.3);
            bn.running_var[c] = rng.random_range(0.5..2.0);
        }
    };
    model.backbone.for_each_bn(&mut randomize);
    model.head.for_each_bn(&mut randomize);
    model.set_bn_mode(BnMode::Frozen);
    model
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.random_range(0.0..1.0))
}
