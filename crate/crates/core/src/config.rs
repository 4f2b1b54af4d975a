//! Run configuration and the flat `key = value` config file format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Thermal,
    Depth,
}

impl Modality {
    /// Name of the auxiliary image directory in a dataset root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Modality::Thermal => "T",
            Modality::Depth => "Depth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Backend {
    Stub,
    Pretrained,
}

/// Which fusion module produces the semantic feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionVariant {
    /// Concat, conv, per-modality cross-attention, concat, conv.
    Full,
    /// Concat plus a single 3x3 conv.
    Simple,
    /// Full, with extra self-attention after both fused features.
    Complex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterVariant {
    Full,
    None,
    /// Plain sum of the two low-rank streams instead of the gated fusion unit.
    NoFusion,
    /// Plain bottleneck adapter on the block feature only.
    PlainBlock,
    /// Plain bottleneck adapter on the semantic feature only.
    PlainSemantic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptVariant {
    Full,
    NoSemantic,
    NoGeometric,
}

/// Every knob of a run. Defaults reproduce the published setup; see
/// [`RunConfig::toy`] for the desk-scale variant used in tests.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // data
    pub large_size: usize,
    pub small_size: usize,
    pub modality: Modality,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub aux_norm_mean: [f64; 3],
    pub aux_norm_std: [f64; 3],
    pub augmentation: bool,

    // foundation
    pub backend: Backend,
    pub pretrained_weights: Option<PathBuf>,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_ratio: usize,
    pub embed_dim: usize,
    pub decoder_heads: usize,
    pub decoder_rounds: usize,
    pub pyramid_stem_stride: usize,
    pub pyramid_widths: [usize; 4],

    // model
    pub num_queries: usize,
    pub query_dim: usize,
    pub bottleneck_dim: usize,
    pub mcfm_heads: usize,
    pub mcfm_level: usize,
    pub fusion: FusionVariant,
    pub adapter: AdapterVariant,
    pub prompts: PromptVariant,
    pub share_adapters: bool,
    pub threshold: f64,
    pub min_area_fraction: f64,
    pub max_points: usize,
    pub per_component_boxes: bool,

    // training
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub main_weight: f64,
    pub coarse_weight: f64,
    pub dice_smooth: f64,
    pub bce_eps: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            large_size: 1024,
            small_size: 384,
            modality: Modality::Thermal,
            train_dir: None,
            test_dir: None,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
            aux_norm_mean: [0.485, 0.456, 0.406],
            aux_norm_std: [0.229, 0.224, 0.225],
            augmentation: false,

            backend: Backend::Stub,
            pretrained_weights: None,
            patch_size: 16,
            encoder_dim: 768,
            encoder_blocks: 12,
            encoder_heads: 12,
            encoder_mlp_ratio: 4,
            embed_dim: 256,
            decoder_heads: 8,
            decoder_rounds: 2,
            pyramid_stem_stride: 4,
            pyramid_widths: [128, 256, 512, 1024],

            num_queries: 30,
            query_dim: 256,
            bottleneck_dim: 0,
            mcfm_heads: 1,
            mcfm_level: 4,
            fusion: FusionVariant::Full,
            adapter: AdapterVariant::Full,
            prompts: PromptVariant::Full,
            share_adapters: false,
            threshold: 0.5,
            min_area_fraction: 0.001,
            max_points: 1,
            per_component_boxes: false,

            lr: 1e-5,
            batch_size: 2,
            epochs: 100,
            max_steps: 0,
            seed: 0,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bce_weight: 1.0,
            dice_weight: 1.0,
            main_weight: 1.0,
            coarse_weight: 1.0,
            dice_smooth: 1.0,
            bce_eps: 1e-7,
            checkpoint_dir: None,
        }
    }
}

const KEYS: &[&str] = &[
    "large_size",
    "small_size",
    "modality",
    "train_dir",
    "test_dir",
    "norm_mean",
    "norm_std",
    "aux_norm_mean",
    "aux_norm_std",
    "augmentation",
    "backend",
    "pretrained_weights",
    "patch_size",
    "encoder_dim",
    "encoder_blocks",
    "encoder_heads",
    "encoder_mlp_ratio",
    "embed_dim",
    "decoder_heads",
    "decoder_rounds",
    "pyramid_stem_stride",
    "pyramid_widths",
    "num_queries",
    "query_dim",
    "bottleneck_dim",
    "mcfm_heads",
    "mcfm_level",
    "fusion",
    "adapter",
    "prompts",
    "share_adapters",
    "threshold",
    "min_area_fraction",
    "max_points",
    "per_component_boxes",
    "lr",
    "batch_size",
    "epochs",
    "max_steps",
    "seed",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "bce_weight",
    "dice_weight",
    "main_weight",
    "coarse_weight",
    "dice_smooth",
    "bce_eps",
    "checkpoint_dir",
];

/// Keys that change the parameter layout; these feed the config hash.
const ARCH_KEYS: &[&str] = &[
    "large_size",
    "small_size",
    "patch_size",
    "encoder_dim",
    "encoder_blocks",
    "encoder_heads",
    "encoder_mlp_ratio",
    "embed_dim",
    "decoder_heads",
    "decoder_rounds",
    "pyramid_stem_stride",
    "pyramid_widths",
    "num_queries",
    "query_dim",
    "bottleneck_dim",
    "mcfm_heads",
    "mcfm_level",
    "fusion",
    "adapter",
    "prompts",
    "share_adapters",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn parse_list<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}`: expected {N} comma-separated values")))
}

fn parse_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() || v == "none" {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "none".into())
}

impl RunConfig {
    /// Desk-scale dimensions: everything runs in seconds on a laptop.
    pub fn toy() -> Self {
        Self {
            large_size: 64,
            small_size: 128,
            patch_size: 4,
            encoder_dim: 32,
            encoder_blocks: 2,
            encoder_heads: 2,
            encoder_mlp_ratio: 2,
            embed_dim: 32,
            decoder_heads: 2,
            decoder_rounds: 2,
            pyramid_stem_stride: 4,
            pyramid_widths: [8, 16, 32, 32],
            query_dim: 32,
            lr: 1e-3,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        // `preset = toy` switches the base before the remaining keys apply
        let mut lines = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", no + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                *self = match v {
                    "toy" => Self::toy(),
                    "default" => Self::default(),
                    _ => return Err(Error::Config(format!("unknown preset `{v}`"))),
                };
            } else {
                lines.push((k.to_string(), v.to_string()));
            }
        }
        for (k, v) in lines {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "large_size" => self.large_size = parse_num(key, v)?,
            "small_size" => self.small_size = parse_num(key, v)?,
            "modality" => {
                self.modality = match v {
                    "thermal" | "t" => Modality::Thermal,
                    "depth" | "d" => Modality::Depth,
                    _ => return Err(Error::Config(format!("unknown modality `{v}`"))),
                }
            }
            "train_dir" => self.train_dir = parse_path(v),
            "test_dir" => self.test_dir = parse_path(v),
            "norm_mean" => self.norm_mean = parse_list(key, v)?,
            "norm_std" => self.norm_std = parse_list(key, v)?,
            "aux_norm_mean" => self.aux_norm_mean = parse_list(key, v)?,
            "aux_norm_std" => self.aux_norm_std = parse_list(key, v)?,
            "augmentation" => {
                self.augmentation = match v {
                    "none" => false,
                    _ => parse_bool(key, v)?,
                }
            }
            "backend" => {
                self.backend = match v {
                    "stub" => Backend::Stub,
                    "pretrained" => Backend::Pretrained,
                    _ => return Err(Error::Config(format!("unknown backend `{v}`"))),
                }
            }
            "pretrained_weights" => self.pretrained_weights = parse_path(v),
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "encoder_dim" => self.encoder_dim = parse_num(key, v)?,
            "encoder_blocks" => self.encoder_blocks = parse_num(key, v)?,
            "encoder_heads" => self.encoder_heads = parse_num(key, v)?,
            "encoder_mlp_ratio" => self.encoder_mlp_ratio = parse_num(key, v)?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "decoder_heads" => self.decoder_heads = parse_num(key, v)?,
            "decoder_rounds" => self.decoder_rounds = parse_num(key, v)?,
            "pyramid_stem_stride" => self.pyramid_stem_stride = parse_num(key, v)?,
            "pyramid_widths" => self.pyramid_widths = parse_list(key, v)?,
            "num_queries" => self.num_queries = parse_num(key, v)?,
            "query_dim" => self.query_dim = parse_num(key, v)?,
            "bottleneck_dim" => self.bottleneck_dim = parse_num(key, v)?,
            "mcfm_heads" => self.mcfm_heads = parse_num(key, v)?,
            "mcfm_level" => self.mcfm_level = parse_num(key, v)?,
            "fusion" => {
                self.fusion = match v {
                    "full" => FusionVariant::Full,
                    "simple" => FusionVariant::Simple,
                    "complex" => FusionVariant::Complex,
                    _ => return Err(Error::Config(format!("unknown fusion variant `{v}`"))),
                }
            }
            "adapter" => {
                self.adapter = match v {
                    "full" => AdapterVariant::Full,
                    "none" => AdapterVariant::None,
                    "no_fusion" => AdapterVariant::NoFusion,
                    "plain_block" => AdapterVariant::PlainBlock,
                    "plain_semantic" => AdapterVariant::PlainSemantic,
                    _ => return Err(Error::Config(format!("unknown adapter variant `{v}`"))),
                }
            }
            "prompts" => {
                self.prompts = match v {
                    "full" => PromptVariant::Full,
                    "no_semantic" => PromptVariant::NoSemantic,
                    "no_geometric" => PromptVariant::NoGeometric,
                    _ => return Err(Error::Config(format!("unknown prompt variant `{v}`"))),
                }
            }
            "share_adapters" => self.share_adapters = parse_bool(key, v)?,
            "threshold" => self.threshold = parse_num(key, v)?,
            "min_area_fraction" => self.min_area_fraction = parse_num(key, v)?,
            "max_points" => self.max_points = parse_num(key, v)?,
            "per_component_boxes" => self.per_component_boxes = parse_bool(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "max_steps" => self.max_steps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "bce_weight" => self.bce_weight = parse_num(key, v)?,
            "dice_weight" => self.dice_weight = parse_num(key, v)?,
            "main_weight" => self.main_weight = parse_num(key, v)?,
            "coarse_weight" => self.coarse_weight = parse_num(key, v)?,
            "dice_smooth" => self.dice_smooth = parse_num(key, v)?,
            "bce_eps" => self.bce_eps = parse_num(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = parse_path(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "large_size" => self.large_size.to_string(),
            "small_size" => self.small_size.to_string(),
            "modality" => match self.modality {
                Modality::Thermal => "thermal".into(),
                Modality::Depth => "depth".into(),
            },
            "train_dir" => path_str(&self.train_dir),
            "test_dir" => path_str(&self.test_dir),
            "norm_mean" => join(&self.norm_mean),
            "norm_std" => join(&self.norm_std),
            "aux_norm_mean" => join(&self.aux_norm_mean),
            "aux_norm_std" => join(&self.aux_norm_std),
            "augmentation" => if self.augmentation { "true" } else { "none" }.into(),
            "backend" => match self.backend {
                Backend::Stub => "stub".into(),
                Backend::Pretrained => "pretrained".into(),
            },
            "pretrained_weights" => path_str(&self.pretrained_weights),
            "patch_size" => self.patch_size.to_string(),
            "encoder_dim" => self.encoder_dim.to_string(),
            "encoder_blocks" => self.encoder_blocks.to_string(),
            "encoder_heads" => self.encoder_heads.to_string(),
            "encoder_mlp_ratio" => self.encoder_mlp_ratio.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "decoder_heads" => self.decoder_heads.to_string(),
            "decoder_rounds" => self.decoder_rounds.to_string(),
            "pyramid_stem_stride" => self.pyramid_stem_stride.to_string(),
            "pyramid_widths" => join(&self.pyramid_widths),
            "num_queries" => self.num_queries.to_string(),
            "query_dim" => self.query_dim.to_string(),
            "bottleneck_dim" => self.bottleneck_dim.to_string(),
            "mcfm_heads" => self.mcfm_heads.to_string(),
            "mcfm_level" => self.mcfm_level.to_string(),
            "fusion" => match self.fusion {
                FusionVariant::Full => "full",
                FusionVariant::Simple => "simple",
                FusionVariant::Complex => "complex",
            }
            .into(),
            "adapter" => match self.adapter {
                AdapterVariant::Full => "full",
                AdapterVariant::None => "none",
                AdapterVariant::NoFusion => "no_fusion",
                AdapterVariant::PlainBlock => "plain_block",
                AdapterVariant::PlainSemantic => "plain_semantic",
            }
            .into(),
            "prompts" => match self.prompts {
                PromptVariant::Full => "full",
                PromptVariant::NoSemantic => "no_semantic",
                PromptVariant::NoGeometric => "no_geometric",
            }
            .into(),
            "share_adapters" => self.share_adapters.to_string(),
            "threshold" => self.threshold.to_string(),
            "min_area_fraction" => self.min_area_fraction.to_string(),
            "max_points" => self.max_points.to_string(),
            "per_component_boxes" => self.per_component_boxes.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "seed" => self.seed.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "bce_weight" => self.bce_weight.to_string(),
            "dice_weight" => self.dice_weight.to_string(),
            "main_weight" => self.main_weight.to_string(),
            "coarse_weight" => self.coarse_weight.to_string(),
            "dice_smooth" => self.dice_smooth.to_string(),
            "bce_eps" => self.bce_eps.to_string(),
            "checkpoint_dir" => path_str(&self.checkpoint_dir),
            _ => return None,
        };
        Some(s)
    }

    /// Render every key; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Resolved bottleneck width (a quarter of the encoder width when unset).
    pub fn bottleneck(&self) -> usize {
        if self.bottleneck_dim == 0 {
            (self.encoder_dim / 4).max(1)
        } else {
            self.bottleneck_dim
        }
    }

    /// Token grid side of the foundation encoder.
    pub fn grid(&self) -> usize {
        self.large_size / self.patch_size
    }

    /// Total downsampling of the top pyramid level.
    pub fn pyramid_stride(&self) -> usize {
        self.pyramid_stem_stride * 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.large_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "large_size {} not divisible by patch_size {}",
                self.large_size, self.patch_size
            ));
        }
        if self.pyramid_stem_stride == 0 || !self.small_size.is_multiple_of(self.pyramid_stride()) {
            return bad(format!(
                "small_size {} not divisible by the pyramid stride {}",
                self.small_size,
                self.pyramid_stride()
            ));
        }
        if self.num_queries == 0 && self.prompts != PromptVariant::NoSemantic {
            return bad("num_queries must be >= 1 unless prompts = no_semantic".into());
        }
        if self.bottleneck() == 0 {
            return bad("bottleneck_dim must be >= 1".into());
        }
        if self.encoder_heads == 0 || !self.encoder_dim.is_multiple_of(self.encoder_heads) {
            return bad("encoder_dim must be a multiple of encoder_heads".into());
        }
        if self.decoder_heads == 0 || !self.embed_dim.is_multiple_of(self.decoder_heads) {
            return bad("embed_dim must be a multiple of decoder_heads".into());
        }
        if !self.embed_dim.is_multiple_of(8) || self.embed_dim < 8 {
            return bad("embed_dim must be a positive multiple of 8".into());
        }
        if self.mcfm_heads == 0 || !self.level_width().is_multiple_of(self.mcfm_heads) {
            return bad("mcfm_heads must divide the fused level width".into());
        }
        if !(1..=4).contains(&self.mcfm_level) {
            return bad(format!("mcfm_level must be in 1..=4, got {}", self.mcfm_level));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Channel width of the pyramid level the fusion module consumes.
    pub fn level_width(&self) -> usize {
        self.pyramid_widths[self.mcfm_level.clamp(1, 4) - 1]
    }

    /// Hex SHA-256 over the architecture-defining keys.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        for k in ARCH_KEYS {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(self.get(k).expect("known key").as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_setup() {
        let c = RunConfig::default();
        assert_eq!((c.large_size, c.small_size), (1024, 384));
        assert_eq!(c.num_queries, 30);
        assert_eq!(c.lr, 1e-5);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.epochs, 100);
        c.validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::toy();
        c.seed = 7;
        c.train_dir = Some("data/train".into());
        c.adapter = AdapterVariant::NoFusion;
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_presets_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# toy run\nseed = 3 # trailing\npreset = toy\n\nnum_queries=5")
            .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.num_queries, 5);
        assert_eq!(c.large_size, 64);
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("seed").is_err());
        assert!(c.apply_text("lr = fast").is_err());
    }

    #[test]
    fn hash_ignores_training_knobs() {
        let a = RunConfig::toy();
        let mut b = a.clone();
        b.lr = 0.5;
        b.seed = 9;
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.num_queries = 3;
        assert_ne!(a.arch_hash(), b.arch_hash());
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let mut c = RunConfig::toy();
        c.large_size = 62;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.small_size = 100;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.num_queries = 0;
        assert!(c.validate().is_err());
        c.prompts = PromptVariant::NoSemantic;
        c.validate().unwrap();
    }
}
