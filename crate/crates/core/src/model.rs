//! Backbone + ASPP head as one trainable segmentation network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aspp::{AsppConfig, AsppHead};
use crate::backbone::{Backbone, NetworkSpec};
use crate::error::Result;
use crate::layers::{ParamKind, Parameterized, Pass, Visitor};
use crate::norm::BnMode;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub backbone: Backbone,
    pub head: AsppHead,
}

impl SegmentationModel {
    pub fn new<R: Rng + ?Sized>(
        network: &NetworkSpec,
        aspp: &AsppConfig,
        output_stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::new(network, output_stride, rng)?;
        let head = AsppHead::new(aspp, backbone.out_channels(), output_stride, rng)?;
        Ok(SegmentationModel { backbone, head })
    }

    /// He initialization from stream 0 of the ChaCha8 generator for `seed`;
    /// training draws from stream 1 of the same seed.
    pub fn from_seed(network: &NetworkSpec, aspp: &AsppConfig, output_stride: usize, seed: u64) -> Result<Self> {
        Self::new(network, aspp, output_stride, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn num_classes(&self) -> usize {
        self.head.config.num_classes
    }

    pub fn output_stride(&self) -> usize {
        self.backbone.output_stride()
    }

    /// Switches the stride/rate assignment of both parts without touching weights.
    pub fn set_output_stride(&mut self, os: usize) -> Result<()> {
        self.head.set_output_stride(os)?;
        self.backbone.set_output_stride(os)
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.backbone.set_bn_mode(mode);
        self.head.set_bn_mode(mode);
    }

    /// Running-statistics decay of every batch norm.
    pub fn set_bn_decay(&mut self, decay: f64) {
        self.backbone.for_each_bn(&mut |bn| bn.decay = decay);
        self.head.for_each_bn(&mut |bn| bn.decay = decay);
    }

    /// Logits at feature resolution, `(n, classes, (h-1)/os+1, (w-1)/os+1)`.
    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let features = self.backbone.forward(x, pass)?;
        self.head.forward(&features, pass)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let g = self.head.backward(grad_logits)?;
        self.backbone.backward(&g)
    }

    /// Flattened copy of every trainable and frozen parameter plus buffers.
    pub fn state(&mut self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |p| out.push((p.name, p.value.to_vec())));
        out
    }

    pub fn trainable_values(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |p| {
            if p.kind == ParamKind::Trainable {
                out.extend_from_slice(p.value);
            }
        });
        out
    }
}

impl Parameterized for SegmentationModel {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let join = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.backbone.visit(&join("backbone"), f);
        self.head.visit(&join("head"), f);
    }
}
