//! Plain-text run configuration.
//!
//! One `section.key = value` per line; blank lines and lines starting with
//! `#` are skipped. Lists are comma separated. Unknown or repeated keys are
//! errors. Stage keys (`stage1.lr`, `stage2.iterations`, ...) replace the
//! default schedule with as many stages as the highest index mentioned;
//! unspecified stage fields keep their defaults.

use std::fmt::Display;
use std::str::FromStr;

use crate::aspp::AsppConfig;
use crate::backbone::{NetworkSpec, CONVS_PER_BLOCK};
use crate::error::{Error, Result};
use crate::eval::InferenceConfig;
use crate::norm::BnMode;
use crate::synth;
use crate::train::{Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub stem_channels: usize,
    pub block_channels: [usize; 4],
    pub multi_grid: [usize; CONVS_PER_BLOCK],
    /// Replicas of block4 appended after it.
    pub extra_blocks: usize,
}

impl NetworkConfig {
    pub fn spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::miniature(self.stem_channels, self.block_channels, self.multi_grid, self.extra_blocks)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Manifest paths, relative to the config file's directory.
    pub train_manifest: String,
    pub val_manifest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub aspp: AsppConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub data: DataConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    /// Desk-scale settings for the six-class synthetic dataset.
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig {
                stem_channels: 16,
                block_channels: [16, 32, 48, 64],
                multi_grid: [1, 2, 4],
                extra_blocks: 0,
            },
            aspp: AsppConfig {
                base_rates: vec![1, 2, 3],
                branch_filters: 64,
                include_image_pooling: true,
                num_classes: synth::NUM_CLASSES,
            },
            train: TrainConfig {
                bn_decay: 0.99,
                stages: vec![
                    Stage { output_stride: 16, bn_mode: BnMode::Train, base_lr: 0.007, iterations: 1000 },
                    Stage { output_stride: 8, bn_mode: BnMode::Frozen, base_lr: 0.005, iterations: 4000 },
                ],
                ..TrainConfig::default()
            },
            infer: InferenceConfig { eval_os: 8, scales: vec![1.0], flip: false },
            data: DataConfig { train_manifest: "train.txt".into(), val_manifest: "val.txt".into() },
            seed: 0,
        }
    }
}

/// Every accepted key (stage keys shown for stage N) with a description.
pub const KEYS: &[(&str, &str)] = &[
    ("network.stem_channels", "channels of the stride-2 stem convolution"),
    ("network.block_channels", "channels of block1..block4"),
    ("network.multi_grid", "unit rates of the three convolutions in block4 and later"),
    ("network.extra_blocks", "replicas of block4 cascaded after it"),
    ("aspp.rates", "3x3 branch rates at output stride 16 (doubled at 8)"),
    ("aspp.filters", "output channels of every ASPP branch and of the fusion conv"),
    ("aspp.image_pooling", "include the image-level pooling branch"),
    ("aspp.num_classes", "number of output classes"),
    ("train.crop_size", "square training crop; must be N*os+1 for every stage"),
    ("train.batch_size", "images per update"),
    ("train.power", "poly learning-rate exponent"),
    ("train.momentum", "SGD momentum"),
    ("train.weight_decay", "L2 coefficient added to gradients"),
    ("train.bn_decay", "batch-norm running-statistics decay"),
    ("train.scale_min", "smallest random rescale factor"),
    ("train.scale_max", "largest random rescale factor"),
    ("train.flip_prob", "probability of a left-right flip"),
    ("train.ignore_label", "label value excluded from loss and metrics"),
    ("train.upsample_logits", "loss on upsampled logits (false: on downsampled labels)"),
    ("train.hard_classes", "class ids whose images are duplicated"),
    ("train.bootstrap_factor", "copies of each hard-class image per epoch"),
    ("train.eval_interval", "validate every N updates (0: end of each stage)"),
    ("stageN.output_stride", "output stride during stage N"),
    ("stageN.bn", "batch norm during stage N: train or frozen"),
    ("stageN.lr", "base learning rate of stage N"),
    ("stageN.iterations", "updates in stage N"),
    ("infer.output_stride", "output stride for the final validation pass"),
    ("infer.scales", "input scales averaged at inference"),
    ("infer.flip", "also average left-right flipped inputs"),
    ("data.train_manifest", "training manifest, relative to the config file"),
    ("data.val_manifest", "validation manifest, relative to the config file"),
    ("run.seed", "seed for initialization, shuffling and augmentation"),
];

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn bn_name(mode: BnMode) -> &'static str {
    match mode {
        BnMode::Train => "train",
        BnMode::Frozen => "frozen",
    }
}

fn parse_one<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_one(s.trim())).collect()
}

fn parse_array<const N: usize>(v: &str) -> std::result::Result<[usize; N], String> {
    let items: Vec<usize> = parse_list(v)?;
    items.try_into().map_err(|items: Vec<usize>| format!("expected {N} values, got {}", items.len()))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn stage_template() -> Stage {
    Stage { output_stride: 16, bn_mode: BnMode::Train, base_lr: 0.007, iterations: 0 }
}

impl RunConfig {
    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let n = &self.network;
        let t = &self.train;
        let mut out: Vec<(String, String)> = vec![
            ("network.stem_channels".into(), n.stem_channels.to_string()),
            ("network.block_channels".into(), list(&n.block_channels)),
            ("network.multi_grid".into(), list(&n.multi_grid)),
            ("network.extra_blocks".into(), n.extra_blocks.to_string()),
            ("aspp.rates".into(), list(&self.aspp.base_rates)),
            ("aspp.filters".into(), self.aspp.branch_filters.to_string()),
            ("aspp.image_pooling".into(), self.aspp.include_image_pooling.to_string()),
            ("aspp.num_classes".into(), self.aspp.num_classes.to_string()),
            ("train.crop_size".into(), t.crop_size.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.power".into(), t.power.to_string()),
            ("train.momentum".into(), t.momentum.to_string()),
            ("train.weight_decay".into(), t.weight_decay.to_string()),
            ("train.bn_decay".into(), t.bn_decay.to_string()),
            ("train.scale_min".into(), t.scale_range.0.to_string()),
            ("train.scale_max".into(), t.scale_range.1.to_string()),
            ("train.flip_prob".into(), t.flip_prob.to_string()),
            ("train.ignore_label".into(), t.ignore_label.to_string()),
            ("train.upsample_logits".into(), t.upsample_logits.to_string()),
            ("train.hard_classes".into(), list(&t.hard_classes)),
            ("train.bootstrap_factor".into(), t.bootstrap_factor.to_string()),
            ("train.eval_interval".into(), t.eval_interval.to_string()),
        ];
        for (i, s) in t.stages.iter().enumerate() {
            let k = i + 1;
            out.push((format!("stage{k}.output_stride"), s.output_stride.to_string()));
            out.push((format!("stage{k}.bn"), bn_name(s.bn_mode).into()));
            out.push((format!("stage{k}.lr"), s.base_lr.to_string()));
            out.push((format!("stage{k}.iterations"), s.iterations.to_string()));
        }
        out.extend([
            ("infer.output_stride".into(), self.infer.eval_os.to_string()),
            ("infer.scales".into(), list(&self.infer.scales)),
            ("infer.flip".into(), self.infer.flip.to_string()),
            ("data.train_manifest".into(), self.data.train_manifest.clone()),
            ("data.val_manifest".into(), self.data.val_manifest.clone()),
            ("run.seed".into(), self.seed.to_string()),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim();
            if !body.is_empty() && !body.starts_with('#') {
                let Some((k, v)) = body.split_once('=') else {
                    return Err(Error::Parse { offset, msg: format!("expected key = value, got {body:?}") });
                };
                let k = k.trim();
                if pairs.iter().any(|(_, seen, _)| *seen == k) {
                    return Err(Error::Parse { offset, msg: format!("key {k} given twice") });
                }
                pairs.push((offset, k, v.trim()));
            }
            offset += line.len();
        }

        let mut cfg = RunConfig::default();
        let stage_count = pairs.iter().filter_map(|(_, k, _)| stage_index(k)).max();
        if let Some(count) = stage_count {
            let defaults = cfg.train.stages.clone();
            cfg.train.stages = (0..count).map(|i| defaults.get(i).cloned().unwrap_or_else(stage_template)).collect();
        }
        for (offset, k, v) in pairs {
            cfg.set(k, v).map_err(|msg| Error::Parse { offset, msg: format!("{k}: {msg}") })?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        if let Some(i) = stage_index(key) {
            let field = key.split_once('.').map(|(_, f)| f).unwrap_or("");
            let stage = &mut self.train.stages[i - 1];
            match field {
                "output_stride" => stage.output_stride = parse_one(v)?,
                "bn" => {
                    stage.bn_mode = match v {
                        "train" => BnMode::Train,
                        "frozen" => BnMode::Frozen,
                        _ => return Err(format!("expected train or frozen, got {v:?}")),
                    }
                }
                "lr" => stage.base_lr = parse_one(v)?,
                "iterations" => stage.iterations = parse_one(v)?,
                _ => return Err("unknown key".into()),
            }
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "network.stem_channels" => self.network.stem_channels = parse_one(v)?,
            "network.block_channels" => self.network.block_channels = parse_array(v)?,
            "network.multi_grid" => self.network.multi_grid = parse_array(v)?,
            "network.extra_blocks" => self.network.extra_blocks = parse_one(v)?,
            "aspp.rates" => self.aspp.base_rates = parse_list(v)?,
            "aspp.filters" => self.aspp.branch_filters = parse_one(v)?,
            "aspp.image_pooling" => self.aspp.include_image_pooling = parse_bool(v)?,
            "aspp.num_classes" => self.aspp.num_classes = parse_one(v)?,
            "train.crop_size" => t.crop_size = parse_one(v)?,
            "train.batch_size" => t.batch_size = parse_one(v)?,
            "train.power" => t.power = parse_one(v)?,
            "train.momentum" => t.momentum = parse_one(v)?,
            "train.weight_decay" => t.weight_decay = parse_one(v)?,
            "train.bn_decay" => t.bn_decay = parse_one(v)?,
            "train.scale_min" => t.scale_range.0 = parse_one(v)?,
            "train.scale_max" => t.scale_range.1 = parse_one(v)?,
            "train.flip_prob" => t.flip_prob = parse_one(v)?,
            "train.ignore_label" => t.ignore_label = parse_one(v)?,
            "train.upsample_logits" => t.upsample_logits = parse_bool(v)?,
            "train.hard_classes" => t.hard_classes = parse_list(v)?,
            "train.bootstrap_factor" => t.bootstrap_factor = parse_one(v)?,
            "train.eval_interval" => t.eval_interval = parse_one(v)?,
            "infer.output_stride" => self.infer.eval_os = parse_one(v)?,
            "infer.scales" => self.infer.scales = parse_list(v)?,
            "infer.flip" => self.infer.flip = parse_bool(v)?,
            "data.train_manifest" => self.data.train_manifest = v.to_string(),
            "data.val_manifest" => self.data.val_manifest = v.to_string(),
            "run.seed" => self.seed = parse_one(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.spec()?.validate()?;
        self.aspp.validate()?;
        self.train.validate()?;
        self.infer.validate()
    }
}

/// 1-based stage index of a `stageN.field` key.
fn stage_index(key: &str) -> Option<usize> {
    let (head, _) = key.split_once('.')?;
    head.strip_prefix("stage")?.parse().ok().filter(|&i| (1..=64).contains(&i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn every_serialized_key_is_documented() {
        for (k, _) in RunConfig::default().entries() {
            let generic = match stage_index(&k) {
                Some(_) => format!("stageN.{}", k.split_once('.').unwrap().1),
                None => k.clone(),
            };
            assert!(KEYS.iter().any(|(d, _)| *d == generic), "{k} undocumented");
        }
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let text = "# comment\n\naspp.rates = 6, 12, 18\n  train.flip_prob = 0\nstage1.iterations = 7\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.aspp.base_rates, vec![6, 12, 18]);
        assert_eq!(cfg.train.flip_prob, 0.0);
        assert_eq!(cfg.train.stages.len(), 1);
        assert_eq!(cfg.train.stages[0].iterations, 7);
        assert_eq!(cfg.train.stages[0].output_stride, 16);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        let offset = |text: &str| match RunConfig::parse(text) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(offset("run.seed = 1\ntrain.nope = 3\n"), 13);
        assert_eq!(offset("run.seed = 1\nrun.seed = 2\n"), 13);
        assert_eq!(offset("stage1.speed = 3\n"), 0);
        assert_eq!(offset("train.upsample_logits = yes\n"), 0);
        assert_eq!(offset("no equals sign\n"), 0);
        assert_eq!(offset("network.multi_grid = 1,2\n"), 0);
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_stable(
            seed in any::<u64>(),
            lr in 1e-6f64..1.0,
            decay in 0.0f64..1.0,
            stages in 1usize..4,
            iters in 0usize..5000,
            flip in any::<bool>(),
            scales in proptest::collection::vec(0.1f64..3.0, 1..5),
            hard in proptest::collection::vec(0u8..6, 0..3),
        ) {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.train.bn_decay = decay;
            cfg.train.hard_classes = hard;
            cfg.train.stages = (0..stages)
                .map(|i| Stage { output_stride: 16 >> i.min(1), bn_mode: BnMode::Frozen, base_lr: lr / (i + 1) as f64, iterations: iters })
                .collect();
            cfg.infer.scales = scales;
            cfg.infer.flip = flip;
            let once = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(&once, &cfg);
            prop_assert_eq!(RunConfig::parse(&once.to_text()).unwrap(), once);
        }
    }
}
