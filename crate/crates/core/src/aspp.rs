//! Atrous spatial pyramid pooling head with image-level features.
//!
//! Branches: one 1x1 conv, one 3x3 atrous conv per rate, and optionally a
//! global-average-pool -> 1x1 conv -> bilinear upsample branch. Every branch
//! is conv + BN + ReLU with `branch_filters` outputs; their concatenation is
//! fused by another 1x1 conv + BN + ReLU and a final 1x1 classifier emits
//! logits.

use rand::Rng;

use crate::conv::ConvLayer;
use crate::error::{config_err, Result};
use crate::layers::{Conv, ConvBn, Parameterized, Pass, Visitor};
use crate::norm::{BatchNorm, BnMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsppConfig {
    /// 3x3 branch rates at output stride 16.
    pub base_rates: Vec<usize>,
    pub branch_filters: usize,
    pub include_image_pooling: bool,
    pub num_classes: usize,
}

impl Default for AsppConfig {
    fn default() -> Self {
        AsppConfig { base_rates: vec![6, 12, 18], branch_filters: 256, include_image_pooling: true, num_classes: 21 }
    }
}

impl AsppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_rates.is_empty() || self.base_rates[0] == 0 {
            return config_err("ASPP rates must be positive and non-empty");
        }
        if self.base_rates.windows(2).any(|w| w[0] >= w[1]) {
            return config_err(format!("ASPP rates {:?} must be strictly increasing", self.base_rates));
        }
        if self.branch_filters == 0 || self.num_classes == 0 {
            return config_err("ASPP filters and classes must be positive");
        }
        Ok(())
    }

    pub fn num_branches(&self) -> usize {
        1 + self.base_rates.len() + usize::from(self.include_image_pooling)
    }

    /// Channel count of the concatenated branch outputs.
    pub fn concat_channels(&self) -> usize {
        self.branch_filters * self.num_branches()
    }
}

/// Rates at the given output stride: the base rates at 16, doubled at 8.
pub fn effective_rates(config: &AsppConfig, output_stride: usize) -> Result<Vec<usize>> {
    match output_stride {
        16 => Ok(config.base_rates.clone()),
        8 => Ok(config.base_rates.iter().map(|r| 2 * r).collect()),
        os => config_err(format!("ASPP rates are defined for output stride 8 or 16, not {os}")),
    }
}

#[derive(Clone, Debug)]
pub struct AsppHead {
    pub config: AsppConfig,
    pub conv1x1: ConvBn,
    pub atrous: Vec<ConvBn>,
    pub image_pool: Option<ConvBn>,
    pub fusion: ConvBn,
    pub classifier: Conv,
    feature_shape: Option<[usize; 4]>,
}

impl AsppHead {
    pub fn new<R: Rng + ?Sized>(
        config: &AsppConfig,
        in_channels: usize,
        output_stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let f = config.branch_filters;
        let conv1x1 = ConvBn::he_init(in_channels, f, 1, true, rng)?;
        let atrous = config
            .base_rates
            .iter()
            .map(|_| ConvBn::he_init(in_channels, f, 3, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let image_pool =
            if config.include_image_pooling { Some(ConvBn::he_init(in_channels, f, 1, true, rng)?) } else { None };
        let fusion = ConvBn::he_init(config.concat_channels(), f, 1, true, rng)?;
        let classifier = Conv::new(ConvLayer::he_init(f, config.num_classes, 1, rng)?);
        let mut head =
            AsppHead { config: config.clone(), conv1x1, atrous, image_pool, fusion, classifier, feature_shape: None };
        head.set_output_stride(output_stride)?;
        Ok(head)
    }

    /// Applies [`effective_rates`]; strides coarser than 16 keep the base rates.
    pub fn set_output_stride(&mut self, output_stride: usize) -> Result<()> {
        let rates = if output_stride > 16 && output_stride.is_power_of_two() {
            self.config.base_rates.clone()
        } else {
            effective_rates(&self.config, output_stride)?
        };
        for (b, r) in self.atrous.iter_mut().zip(rates) {
            b.conv.rate = r;
        }
        Ok(())
    }

    pub fn rates(&self) -> Vec<usize> {
        self.atrous.iter().map(|b| b.conv.rate).collect()
    }

    /// Concatenated branch outputs, before fusion.
    pub fn branches(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        if x.h() == 0 || x.w() == 0 {
            return config_err("zero-sized feature map");
        }
        let mut outs = vec![self.conv1x1.forward(x, pass)?];
        for b in &mut self.atrous {
            outs.push(b.forward(x, pass)?);
        }
        if let Some(p) = &mut self.image_pool {
            let pooled = p.forward(&x.global_avg_pool(), pass)?;
            outs.push(pooled.bilinear_resize(x.h(), x.w()));
        }
        self.feature_shape = (pass == Pass::Train).then_some(x.shape());
        Tensor::concat_channels(&outs.iter().collect::<Vec<_>>())
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let cat = self.branches(x, pass)?;
        let fused = self.fusion.forward(&cat, pass)?;
        self.classifier.forward(&fused, pass)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let Some(shape) = self.feature_shape.take() else {
            return config_err("backward without a recorded forward pass");
        };
        let [_, _, h, w] = shape;
        let g_fused = self.classifier.backward(grad)?;
        let g_cat = self.fusion.backward(&g_fused)?;
        let f = self.config.branch_filters;
        let mut gx = self.conv1x1.backward(&g_cat.narrow_channels(0, f))?;
        for (i, b) in self.atrous.iter_mut().enumerate() {
            gx.add_assign(&b.backward(&g_cat.narrow_channels((i + 1) * f, f))?)?;
        }
        if let Some(p) = &mut self.image_pool {
            let g_up = g_cat.narrow_channels((self.atrous.len() + 1) * f, f);
            let g_pooled = p.backward(&g_up.bilinear_resize_backward(1, 1))?;
            // the mean spreads its gradient evenly over the map
            let area = (h * w) as f64;
            let spread = Tensor::from_fn(shape, |n, c, _, _| g_pooled.get(n, c, 0, 0) / area);
            gx.add_assign(&spread)?;
        }
        Ok(gx)
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.for_each_bn(&mut |bn| bn.mode = mode);
    }

    pub fn for_each_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        std::iter::once(&mut self.conv1x1)
            .chain(self.atrous.iter_mut())
            .chain(self.image_pool.iter_mut())
            .chain(std::iter::once(&mut self.fusion))
            .for_each(|u| f(&mut u.bn));
    }
}

impl Parameterized for AsppHead {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.conv1x1.visit(&format!("{prefix}.conv1x1"), f);
        for (i, b) in self.atrous.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.atrous{}", i + 1), f);
        }
        if let Some(p) = &mut self.image_pool {
            p.visit(&format!("{prefix}.image_pool"), f);
        }
        self.fusion.visit(&format!("{prefix}.fusion"), f);
        self.classifier.visit(&format!("{prefix}.classifier"), f);
    }
}
