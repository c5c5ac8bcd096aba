//! Flat binary checkpoints.
//!
//! Layout (little endian): magic `DLV3`, `u32` version, `u32` entry count,
//! then per entry a `u32` name length, the UTF-8 name, a `u64` value count
//! and that many `f64` values. Entries keep their insertion order.
//!
//! A model checkpoint stores its architecture under `arch.*`, every
//! parameter and running statistic under its visit name, optimizer momenta
//! under `opt.velocity.<name>`, and the update count as `train.iteration`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aspp::AsppConfig;
use crate::backbone::{BlockSpec, NetworkSpec, CONVS_PER_BLOCK};
use crate::error::{config_err, Error, Result};
use crate::layers::Parameterized;
use crate::model::SegmentationModel;
use crate::train::Sgd;

pub const MAGIC: &[u8; 4] = b"DLV3";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.entries.push((name.into(), values));
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name).ok_or_else(|| Error::Config(format!("checkpoint has no entry {name:?}")))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        match self.require(name)? {
            [v] => Ok(*v),
            other => config_err(format!("{name} should hold one value, found {}", other.len())),
        }
    }

    fn integers(&self, name: &str) -> Result<Vec<usize>> {
        self.require(name)?
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
                    Ok(v as usize)
                } else {
                    config_err(format!("{name} holds non-integer value {v}"))
                }
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, values) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Parse { offset: 0, msg: "missing DLV3 magic".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Parse { offset: 4, msg: format!("unsupported version {version}") });
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Parse { offset: at + 4, msg: "entry name is not UTF-8".into() })?
                .to_string();
            let n = r.u64("value count")?;
            let n = usize::try_from(n)
                .ok()
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| Error::Parse { offset: r.pos - 8, msg: format!("value count {n} too large") })?;
            let raw = r.take(n * 8, "values")?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            entries.push((name, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse { offset: r.pos, msg: "trailing bytes after last entry".into() });
        }
        Ok(Checkpoint { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse { offset: self.bytes.len(), msg: format!("truncated while reading {what}") })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn counts(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Architecture, weights, running statistics and (optionally) optimizer
/// state in one checkpoint.
pub fn save_model(model: &mut SegmentationModel, optimizer: Option<&Sgd>, iteration: usize) -> Checkpoint {
    let mut ck = Checkpoint::default();
    let spec = &model.backbone.spec;
    let blocks = &spec.blocks;
    ck.push("arch.in_channels", counts(&[spec.in_channels]));
    ck.push("arch.stem_channels", counts(&[spec.stem_channels]));
    ck.push("arch.block_channels", counts(&blocks.iter().map(|b| b.channels).collect::<Vec<_>>()));
    ck.push("arch.block_strides", counts(&blocks.iter().map(|b| b.nominal_stride).collect::<Vec<_>>()));
    ck.push("arch.unit_rates", counts(&blocks.iter().flat_map(|b| b.unit_rates).collect::<Vec<_>>()));
    let aspp = &model.head.config;
    ck.push("arch.aspp_rates", counts(&aspp.base_rates));
    ck.push("arch.aspp_filters", counts(&[aspp.branch_filters]));
    ck.push("arch.image_pooling", counts(&[usize::from(aspp.include_image_pooling)]));
    ck.push("arch.num_classes", counts(&[aspp.num_classes]));
    ck.push("arch.output_stride", counts(&[model.output_stride()]));
    for (name, values) in model.state() {
        ck.push(name, values);
    }
    if let Some(opt) = optimizer {
        ck.push("opt.momentum", vec![opt.momentum]);
        ck.push("opt.weight_decay", vec![opt.weight_decay]);
        for (name, v) in &opt.velocity {
            ck.push(format!("opt.velocity.{name}"), v.clone());
        }
    }
    ck.push("train.iteration", counts(&[iteration]));
    ck
}

pub fn network_spec(ck: &Checkpoint) -> Result<(NetworkSpec, AsppConfig)> {
    let channels = ck.integers("arch.block_channels")?;
    let strides = ck.integers("arch.block_strides")?;
    let rates = ck.integers("arch.unit_rates")?;
    if strides.len() != channels.len() || rates.len() != CONVS_PER_BLOCK * channels.len() {
        return config_err("inconsistent block description in checkpoint");
    }
    let blocks = channels
        .iter()
        .zip(&strides)
        .zip(rates.chunks(CONVS_PER_BLOCK))
        .enumerate()
        .map(|(i, ((&channels, &nominal_stride), r))| BlockSpec {
            name: format!("block{}", i + 1),
            channels,
            nominal_stride,
            unit_rates: [r[0], r[1], r[2]],
        })
        .collect();
    let spec = NetworkSpec {
        in_channels: ck.scalar("arch.in_channels")? as usize,
        stem_channels: ck.scalar("arch.stem_channels")? as usize,
        blocks,
    };
    let aspp = AsppConfig {
        base_rates: ck.integers("arch.aspp_rates")?,
        branch_filters: ck.scalar("arch.aspp_filters")? as usize,
        include_image_pooling: ck.scalar("arch.image_pooling")? != 0.0,
        num_classes: ck.scalar("arch.num_classes")? as usize,
    };
    Ok((spec, aspp))
}

/// Rebuilds the model and copies every stored tensor into it.
pub fn load_model(ck: &Checkpoint) -> Result<SegmentationModel> {
    let (spec, aspp) = network_spec(ck)?;
    let os = ck.scalar("arch.output_stride")? as usize;
    let mut model = SegmentationModel::new(&spec, &aspp, os, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut failure = None;
    model.visit("", &mut |p| match ck.get(&p.name) {
        Some(v) if v.len() == p.value.len() => p.value.copy_from_slice(v),
        Some(v) => {
            failure.get_or_insert(format!("{} holds {} values, model expects {}", p.name, v.len(), p.value.len()));
        }
        None => {
            failure.get_or_insert(format!("checkpoint has no entry {:?}", p.name));
        }
    });
    match failure {
        Some(msg) => config_err(msg),
        None => Ok(model),
    }
}

pub fn load_optimizer(ck: &Checkpoint) -> Result<Sgd> {
    let mut velocity = BTreeMap::new();
    for (name, v) in &ck.entries {
        if let Some(param) = name.strip_prefix("opt.velocity.") {
            velocity.insert(param.to_string(), v.clone());
        }
    }
    Ok(Sgd { momentum: ck.scalar("opt.momentum")?, weight_decay: ck.scalar("opt.weight_decay")?, velocity })
}

pub fn iteration(ck: &Checkpoint) -> Result<usize> {
    Ok(ck.scalar("train.iteration")? as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Pass;
    use crate::tensor::Tensor;

    #[test]
    fn encode_decode_round_trip() {
        let mut ck = Checkpoint::default();
        ck.push("a", vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]);
        ck.push("", vec![]);
        ck.push("ünïcode", vec![f64::NAN]);
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"DLV3");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.get("a").unwrap()[3], 1e300);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut ck = Checkpoint::default();
        ck.push("w", vec![1.0, 2.0]);
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::decode(&long), Err(Error::Parse { offset, .. }) if offset == bytes.len()));
    }

    #[test]
    fn model_round_trip_preserves_outputs() {
        let spec = NetworkSpec::miniature(4, [4, 6, 8, 8], [1, 2, 1], 0).unwrap();
        let aspp =
            AsppConfig { base_rates: vec![1, 2], branch_filters: 4, include_image_pooling: true, num_classes: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = SegmentationModel::new(&spec, &aspp, 16, &mut rng).unwrap();
        let x = Tensor::from_fn([2, 3, 33, 33], |n, c, y, i| ((n + 2 * c + 3 * y + 5 * i) % 13) as f64 / 13.0);
        model.forward(&x, Pass::Train).unwrap();
        let mut sgd = Sgd::new(0.9, 1e-4);
        sgd.velocity.insert("head.fusion.conv.weight".into(), vec![0.5; 3]);

        let ck = save_model(&mut model, Some(&sgd), 42);
        let bytes = ck.encode();
        let ck2 = Checkpoint::decode(&bytes).unwrap();
        let mut loaded = load_model(&ck2).unwrap();
        assert_eq!(load_optimizer(&ck2).unwrap(), sgd);
        assert_eq!(iteration(&ck2).unwrap(), 42);
        assert_eq!(save_model(&mut loaded, Some(&sgd), 42).encode(), bytes);
        let a = model.forward(&x, Pass::Eval).unwrap();
        let b = loaded.forward(&x, Pass::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let spec = NetworkSpec::miniature(4, [4, 4, 4, 4], [1, 1, 1], 0).unwrap();
        let aspp = AsppConfig { base_rates: vec![1], branch_filters: 2, include_image_pooling: false, num_classes: 2 };
        let mut model = SegmentationModel::new(&spec, &aspp, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut ck = save_model(&mut model, None, 0);
        ck.entries.retain(|(n, _)| n != "head.classifier.bias");
        assert!(load_model(&ck).is_err());
    }
}
