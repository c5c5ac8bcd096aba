//! Miniature residual backbone with output-stride control.
//!
//! A [`NetworkSpec`] lists the nominal strides and multi-grid unit rates.
//! [`convert_to_output_stride`] walks it in order; once the cumulative
//! stride reaches the target, every later stride is dropped to 1 and a rate
//! multiplier (starting at 1) doubles at each dropped stride-2 layer. Each
//! convolution's final rate is that multiplier times its unit rate.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::layers::{ConvBn, MaxPool, Parameterized, Pass, Visitor};
use crate::norm::{BatchNorm, BnMode};
use crate::tensor::Tensor;

pub const CONVS_PER_BLOCK: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub channels: usize,
    /// Stride of the block's last convolution (1 or 2).
    pub nominal_stride: usize,
    /// Multi-grid unit rates, one per convolution.
    pub unit_rates: [usize; CONVS_PER_BLOCK],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    /// 3x3 stride-2 convolution followed by a 3x3 stride-2 max pool.
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

/// Layers of the stem, in walk order.
const STEM_LAYERS: [&str; 2] = ["stem.conv", "stem.pool"];
const STEM_STRIDE: usize = 4;

impl NetworkSpec {
    /// Four blocks standing in for ResNet block1..block4, plus
    /// `extra_blocks` replicas of block4. Every block's last convolution has
    /// stride 2 except the final block's. `multi_grid` applies from block4 on.
    pub fn miniature(
        stem_channels: usize,
        block_channels: [usize; 4],
        multi_grid: [usize; CONVS_PER_BLOCK],
        extra_blocks: usize,
    ) -> Result<Self> {
        if multi_grid.contains(&0) {
            return config_err("multi-grid unit rates must be positive");
        }
        let total = 4 + extra_blocks;
        let blocks = (0..total)
            .map(|i| BlockSpec {
                name: format!("block{}", i + 1),
                channels: block_channels[i.min(3)],
                nominal_stride: if i + 1 == total { 1 } else { 2 },
                unit_rates: if i >= 3 { multi_grid } else { [1; CONVS_PER_BLOCK] },
            })
            .collect();
        Ok(NetworkSpec { in_channels: 3, stem_channels, blocks })
    }

    pub fn nominal_output_stride(&self) -> usize {
        STEM_STRIDE * self.blocks.iter().map(|b| b.nominal_stride).product::<usize>()
    }

    pub fn extra_blocks(&self) -> usize {
        self.blocks.len().saturating_sub(4)
    }

    pub fn multi_grid(&self) -> [usize; CONVS_PER_BLOCK] {
        self.blocks.get(3).map_or([1; CONVS_PER_BLOCK], |b| b.unit_rates)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return config_err("network needs at least one block");
        }
        for b in &self.blocks {
            if b.unit_rates.contains(&0) {
                return config_err(format!("{}: unit rates must be positive", b.name));
            }
            if !matches!(b.nominal_stride, 1 | 2) {
                return config_err(format!("{}: nominal stride must be 1 or 2", b.name));
            }
            if b.channels == 0 {
                return config_err(format!("{}: zero channels", b.name));
            }
        }
        Ok(())
    }
}

/// Resolved stride and rate of one strided-or-atrous layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedLayer {
    pub name: String,
    pub stride: usize,
    pub rate: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompiledNetwork {
    /// Stem conv, stem pool, then three convolutions per block.
    pub layers: Vec<ResolvedLayer>,
    /// Rate multiplier in effect at each block's first convolution.
    pub block_multipliers: Vec<usize>,
    pub output_stride: usize,
}

impl CompiledNetwork {
    pub fn layer(&self, name: &str) -> Option<&ResolvedLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Final rates of one block's convolutions.
    pub fn block_rates(&self, block: usize) -> [usize; CONVS_PER_BLOCK] {
        let base = STEM_LAYERS.len() + block * CONVS_PER_BLOCK;
        std::array::from_fn(|i| self.layers[base + i].rate)
    }

    pub fn block_stride(&self, block: usize) -> usize {
        self.layers[STEM_LAYERS.len() + block * CONVS_PER_BLOCK + CONVS_PER_BLOCK - 1].stride
    }

    /// A spec whose nominal strides and unit rates are the compiled ones.
    pub fn equivalent_spec(&self, spec: &NetworkSpec) -> NetworkSpec {
        let mut out = spec.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            b.nominal_stride = self.block_stride(i);
            b.unit_rates = self.block_rates(i);
        }
        out
    }
}

pub fn convert_to_output_stride(spec: &NetworkSpec, target_os: usize) -> Result<CompiledNetwork> {
    spec.validate()?;
    let nominal = spec.nominal_output_stride();
    if !target_os.is_power_of_two() {
        return config_err(format!("output stride {target_os} is not a power of two"));
    }
    if target_os > nominal {
        return config_err(format!("output stride {target_os} exceeds the nominal {nominal}"));
    }
    let mut walk = StrideWalk { target: target_os, current: 1, multiplier: 1 };
    let mut layers: Vec<ResolvedLayer> = STEM_LAYERS.iter().map(|n| walk.step(n.to_string(), 2, 1)).collect();
    let mut block_multipliers = Vec::with_capacity(spec.blocks.len());
    for block in &spec.blocks {
        block_multipliers.push(walk.multiplier);
        for (i, &unit) in block.unit_rates.iter().enumerate() {
            let stride = if i + 1 == CONVS_PER_BLOCK { block.nominal_stride } else { 1 };
            layers.push(walk.step(format!("{}.conv{}", block.name, i + 1), stride, unit));
        }
    }
    Ok(CompiledNetwork { layers, block_multipliers, output_stride: walk.current })
}

struct StrideWalk {
    target: usize,
    current: usize,
    multiplier: usize,
}

impl StrideWalk {
    fn step(&mut self, name: String, nominal_stride: usize, unit_rate: usize) -> ResolvedLayer {
        let rate = self.multiplier * unit_rate;
        if self.current >= self.target {
            self.multiplier *= nominal_stride;
            ResolvedLayer { name, stride: 1, rate }
        } else {
            self.current *= nominal_stride;
            ResolvedLayer { name, stride: nominal_stride, rate }
        }
    }
}

/// Base rate multipliers of block4 and the `num_extra_blocks` replicas after it.
pub fn cascade_rates(compiled: &CompiledNetwork, num_extra_blocks: usize) -> Vec<usize> {
    compiled.block_multipliers.iter().skip(3).take(num_extra_blocks + 1).copied().collect()
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub units: Vec<ConvBn>,
    /// 1x1 projection when channels or nominal stride change.
    pub shortcut: Option<ConvBn>,
    sum: Option<Tensor>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(c_in: usize, spec: &BlockSpec, rng: &mut R) -> Result<Self> {
        let c = spec.channels;
        let units = vec![
            ConvBn::he_init(c_in, c, 3, true, rng)?,
            ConvBn::he_init(c, c, 3, true, rng)?,
            ConvBn::he_init(c, c, 3, false, rng)?,
        ];
        let shortcut =
            if c_in != c || spec.nominal_stride != 1 { Some(ConvBn::he_init(c_in, c, 1, false, rng)?) } else { None };
        Ok(ResidualBlock { units, shortcut, sum: None })
    }

    fn apply(&mut self, rates: [usize; CONVS_PER_BLOCK], stride: usize) {
        for (u, r) in self.units.iter_mut().zip(rates) {
            u.conv.rate = r;
            u.conv.stride = 1;
        }
        self.units[CONVS_PER_BLOCK - 1].conv.stride = stride;
        if let Some(s) = &mut self.shortcut {
            s.conv.stride = stride;
        }
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let mut h = x.clone();
        for u in &mut self.units {
            h = u.forward(&h, pass)?;
        }
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(x, pass)?,
            None => x.clone(),
        };
        h.add_assign(&skip)?;
        if pass == Pass::Train {
            self.sum = Some(h.clone());
        }
        Ok(h.relu())
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let Some(sum) = self.sum.take() else {
            return config_err("backward without a recorded forward pass");
        };
        let mut g = grad.clone();
        for (gv, &s) in g.data_mut().iter_mut().zip(sum.data()) {
            if s <= 0.0 {
                *gv = 0.0;
            }
        }
        let mut gm = g.clone();
        for u in self.units.iter_mut().rev() {
            gm = u.backward(&gm)?;
        }
        let gs = match &mut self.shortcut {
            Some(s) => s.backward(&g)?,
            None => g,
        };
        gm.add_assign(&gs)?;
        Ok(gm)
    }

    fn for_each_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.units.iter_mut().chain(self.shortcut.iter_mut()).for_each(|u| f(&mut u.bn));
    }
}

impl Parameterized for ResidualBlock {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit(&format!("{prefix}.conv{}", i + 1), f);
        }
        if let Some(s) = &mut self.shortcut {
            s.visit(&format!("{prefix}.shortcut"), f);
        }
    }
}

/// Backbone weights plus the stride/rate assignment currently applied.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: NetworkSpec,
    pub stem: ConvBn,
    pub pool: MaxPool,
    pub blocks: Vec<ResidualBlock>,
    compiled: CompiledNetwork,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, output_stride: usize, rng: &mut R) -> Result<Self> {
        let compiled = convert_to_output_stride(spec, output_stride)?;
        let stem = ConvBn::he_init(spec.in_channels, spec.stem_channels, 3, true, rng)?;
        let mut c_in = spec.stem_channels;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            blocks.push(ResidualBlock::new(c_in, b, rng)?);
            c_in = b.channels;
        }
        let mut net =
            Backbone { spec: spec.clone(), stem, pool: MaxPool::new(3, 2), blocks, compiled: compiled.clone() };
        net.apply(compiled);
        Ok(net)
    }

    pub fn out_channels(&self) -> usize {
        self.spec.blocks.last().map_or(self.spec.stem_channels, |b| b.channels)
    }

    pub fn compiled(&self) -> &CompiledNetwork {
        &self.compiled
    }

    pub fn output_stride(&self) -> usize {
        self.compiled.output_stride
    }

    /// Recompiles for a new output stride; weights are untouched.
    pub fn set_output_stride(&mut self, os: usize) -> Result<()> {
        let compiled = convert_to_output_stride(&self.spec, os)?;
        self.apply(compiled);
        Ok(())
    }

    fn apply(&mut self, compiled: CompiledNetwork) {
        self.stem.conv.stride = compiled.layers[0].stride;
        self.stem.conv.rate = compiled.layers[0].rate;
        self.pool.stride = compiled.layers[1].stride;
        self.pool.rate = compiled.layers[1].rate;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.apply(compiled.block_rates(i), compiled.block_stride(i));
        }
        self.compiled = compiled;
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let os = self.output_stride();
        if h == 0 || w == 0 || !(h - 1).is_multiple_of(os) || !(w - 1).is_multiple_of(os) {
            return config_err(format!(
                "input {h}x{w} is not aligned to output stride {os}: sizes must be N*{os}+1 (e.g. {}, {})",
                2 * os + 1,
                4 * os + 1
            ));
        }
        Ok(())
    }

    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        let os = self.output_stride();
        ((h - 1) / os + 1, (w - 1) / os + 1)
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        self.check_input(x.h(), x.w())?;
        let mut h = self.stem.forward(x, pass)?;
        h = self.pool.forward(&h, pass)?;
        for b in &mut self.blocks {
            h = b.forward(&h, pass)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        g = self.pool.backward(&g)?;
        self.stem.backward(&g)
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.for_each_bn(&mut |bn| bn.mode = mode);
    }

    pub fn for_each_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        f(&mut self.stem.bn);
        self.blocks.iter_mut().for_each(|b| b.for_each_bn(f));
    }
}

impl Parameterized for Backbone {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.{}", self.spec.blocks[i].name), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(mg: [usize; 3], extra: usize) -> NetworkSpec {
        NetworkSpec::miniature(4, [4, 6, 8, 8], mg, extra).unwrap()
    }

    #[test]
    fn nominal_target_leaves_spec_unchanged() {
        let s = spec([1, 2, 4], 0);
        let c = convert_to_output_stride(&s, 32).unwrap();
        assert_eq!(c.output_stride, 32);
        assert_eq!(c.block_rates(3), [1, 2, 4]);
        assert_eq!(c.equivalent_spec(&s), s);
    }

    #[test]
    fn multi_grid_at_os16() {
        let c = convert_to_output_stride(&spec([1, 2, 4], 0), 16).unwrap();
        assert_eq!(c.block_rates(3), [2, 4, 8]);
        assert_eq!(c.output_stride, 16);
        assert_eq!(c.block_stride(2), 1);
    }

    #[test]
    fn plain_network_at_os8() {
        let c = convert_to_output_stride(&spec([1, 1, 1], 0), 8).unwrap();
        assert_eq!(c.block_rates(2), [2, 2, 2]);
        assert_eq!(c.block_rates(3), [4, 4, 4]);
        assert_eq!(c.block_stride(1), 1);
        assert_eq!(c.block_stride(0), 2);
    }

    #[test]
    fn cascade_doubles_rates() {
        let s = spec([1, 2, 1], 3);
        assert_eq!(s.nominal_output_stride(), 256);
        let c16 = convert_to_output_stride(&s, 16).unwrap();
        assert_eq!(cascade_rates(&c16, 3), vec![2, 4, 8, 16]);
        assert_eq!(c16.block_rates(6), [16, 32, 16]);
        let c8 = convert_to_output_stride(&s, 8).unwrap();
        assert_eq!(cascade_rates(&c8, 3), vec![4, 8, 16, 32]);
        let plain = convert_to_output_stride(&spec([1, 2, 4], 0), 16).unwrap();
        assert_eq!(cascade_rates(&plain, 0), vec![2]);
        let kept = convert_to_output_stride(&s, 256).unwrap();
        assert_eq!(kept.output_stride, 256);
    }

    #[test]
    fn invalid_targets() {
        let s = spec([1, 2, 4], 0);
        assert!(convert_to_output_stride(&s, 64).is_err());
        assert!(convert_to_output_stride(&s, 12).is_err());
        assert!(NetworkSpec::miniature(4, [4; 4], [1, 0, 1], 0).is_err());
    }

    #[test]
    fn compilation_is_idempotent_in_effect() {
        let s = spec([1, 2, 4], 1);
        for os in [8, 16, 32] {
            let c = convert_to_output_stride(&s, os).unwrap();
            let again = convert_to_output_stride(&c.equivalent_spec(&s), os).unwrap();
            assert_eq!(again.layers, c.layers);
        }
    }

    #[test]
    fn rates_ignore_channel_widths() {
        let a = NetworkSpec::miniature(4, [4, 6, 8, 8], [1, 2, 4], 1).unwrap();
        let b = NetworkSpec::miniature(16, [32, 64, 128, 256], [1, 2, 4], 1).unwrap();
        for os in [8, 16] {
            assert_eq!(convert_to_output_stride(&a, os).unwrap(), convert_to_output_stride(&b, os).unwrap());
        }
    }

    #[test]
    fn feature_size_and_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Backbone::new(&spec([1, 2, 4], 0), 16, &mut rng).unwrap();
        let x = Tensor::full([2, 3, 65, 65], 0.5);
        let y = net.forward(&x, Pass::Train).unwrap();
        assert_eq!(y.shape(), [2, 8, 5, 5]);
        let err = net.forward(&Tensor::zeros([1, 3, 64, 64]), Pass::Eval).unwrap_err();
        assert!(err.to_string().contains("N*16+1"));
    }

    #[test]
    fn zero_residual_branch_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bs = BlockSpec { name: "b".into(), channels: 3, nominal_stride: 1, unit_rates: [1, 1, 1] };
        let mut block = ResidualBlock::new(3, &bs, &mut rng).unwrap();
        assert!(block.shortcut.is_none());
        for u in &mut block.units {
            u.conv.weights.data_mut().fill(0.0);
        }
        let x = Tensor::from_fn([2, 3, 5, 5], |b, c, i, j| ((b + c * i + j) % 4) as f64);
        assert_eq!(block.forward(&x, Pass::Train).unwrap(), x);
    }
}
