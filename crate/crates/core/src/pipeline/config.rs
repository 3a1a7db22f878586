//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! gen.c = 29.4
//! vlm.variants = ft_img, villa
//! ```

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::assignment::{AssignConfig, AssignMode};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::mapping::{MappingConfig, TrainHyper};
use crate::optim::Optimizer;
use crate::synth::{DigitSource, GenConfig};
use crate::vlm::{VlmHyper, VlmVariant};

/// Held-out evaluation and baseline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub test_images: usize,
    pub test_seed: u64,
    pub random_seed: u64,
    /// Seeds averaged per sweep point.
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub encoder: EncoderConfig,
    pub mapping: MappingConfig,
    pub map_train: TrainHyper,
    /// Assignment for the trained mapping.
    pub assign: AssignConfig,
    /// Threshold for the zero-shot pairs.
    pub zs_epsilon: f64,
    pub vlm: VlmHyper,
    pub variants: Vec<VlmVariant>,
    pub eval: EvalConfig,
    pub sweep_c: Vec<f64>,
    pub sweep_variant: VlmVariant,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenConfig::new(29.4, 10_000, 7),
            encoder: EncoderConfig::default(),
            mapping: MappingConfig::default(),
            map_train: TrainHyper {
                lr: 1e-4,
                batch_size: 48,
                epochs: 30,
                seed: 1,
                optimizer: Optimizer::default(),
            },
            assign: AssignConfig::attr_to_regions(0.2),
            zs_epsilon: 0.1,
            vlm: VlmHyper {
                lr: 5e-5,
                batch_size: 64,
                max_epochs: 100,
                patience: 5,
                tau: 0.07,
                seed: 1,
                optimizer: Optimizer::default(),
                mask_same_image: true,
            },
            variants: VlmVariant::ALL.to_vec(),
            eval: EvalConfig {
                test_images: 200,
                test_seed: 1007,
                random_seed: 1,
                seeds: 1,
            },
            sweep_c: vec![5.0, 9.9, 14.8, 19.6, 24.5, 29.4],
            sweep_variant: VlmVariant::FtImg,
        }
    }
}

/// Every key, in canonical order.
pub const KEYS: &[&str] = &[
    "gen.c",
    "gen.b",
    "gen.seed",
    "gen.digits",
    "enc.d",
    "enc.token_seed",
    "enc.feature_version",
    "map.p",
    "map.adapter_alpha",
    "map.tau",
    "map.normalize",
    "map.lr",
    "map.batch_size",
    "map.epochs",
    "map.seed",
    "map.optimizer",
    "assign.epsilon",
    "assign.mode",
    "assign.zs_epsilon",
    "vlm.lr",
    "vlm.batch_size",
    "vlm.max_epochs",
    "vlm.patience",
    "vlm.tau",
    "vlm.seed",
    "vlm.optimizer",
    "vlm.mask_same_image",
    "vlm.variants",
    "eval.test_images",
    "eval.test_seed",
    "eval.random_seed",
    "eval.seeds",
    "sweep.c",
    "sweep.variant",
];

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a number"))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn optimizer(key: &str, value: &str) -> Result<Optimizer> {
    match value {
        "adam" => Ok(Optimizer::default()),
        "sgd" => Ok(Optimizer::Sgd),
        _ => Err(bad(key, value, "expected adam or sgd")),
    }
}

fn optimizer_name(o: &Optimizer) -> &'static str {
    match o {
        Optimizer::Adam { .. } => "adam",
        Optimizer::Sgd => "sgd",
    }
}

fn variant(key: &str, value: &str) -> Result<VlmVariant> {
    VlmVariant::parse(value).ok_or_else(|| bad(key, value, "unknown variant"))
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        let join = |xs: Vec<String>| xs.join(",");
        Ok(match key {
            "gen.c" => self.gen.c.to_string(),
            "gen.b" => self.gen.b.to_string(),
            "gen.seed" => self.gen.seed.to_string(),
            "gen.digits" => match &self.gen.digit_source {
                DigitSource::SyntheticGlyphs => "synthetic".into(),
                DigitSource::MnistIdx { images, labels } => {
                    format!("mnist:{},{}", images.display(), labels.display())
                }
            },
            "enc.d" => self.encoder.d.to_string(),
            "enc.token_seed" => self.encoder.token_seed.to_string(),
            "enc.feature_version" => self.encoder.feature_version.to_string(),
            "map.p" => self.mapping.p.to_string(),
            "map.adapter_alpha" => self.mapping.adapter_alpha.to_string(),
            "map.tau" => self.mapping.tau.to_string(),
            "map.normalize" => self.mapping.normalize.to_string(),
            "map.lr" => self.map_train.lr.to_string(),
            "map.batch_size" => self.map_train.batch_size.to_string(),
            "map.epochs" => self.map_train.epochs.to_string(),
            "map.seed" => self.map_train.seed.to_string(),
            "map.optimizer" => optimizer_name(&self.map_train.optimizer).into(),
            "assign.epsilon" => self.assign.epsilon.to_string(),
            "assign.mode" => match self.assign.mode {
                AssignMode::AttrToRegions => "attr_to_regions".into(),
                AssignMode::RegionToArgmaxAttr => "region_to_argmax_attr".into(),
            },
            "assign.zs_epsilon" => self.zs_epsilon.to_string(),
            "vlm.lr" => self.vlm.lr.to_string(),
            "vlm.batch_size" => self.vlm.batch_size.to_string(),
            "vlm.max_epochs" => self.vlm.max_epochs.to_string(),
            "vlm.patience" => self.vlm.patience.to_string(),
            "vlm.tau" => self.vlm.tau.to_string(),
            "vlm.seed" => self.vlm.seed.to_string(),
            "vlm.optimizer" => optimizer_name(&self.vlm.optimizer).into(),
            "vlm.mask_same_image" => self.vlm.mask_same_image.to_string(),
            "vlm.variants" => join(self.variants.iter().map(|v| v.to_string()).collect()),
            "eval.test_images" => self.eval.test_images.to_string(),
            "eval.test_seed" => self.eval.test_seed.to_string(),
            "eval.random_seed" => self.eval.random_seed.to_string(),
            "eval.seeds" => self.eval.seeds.to_string(),
            "sweep.c" => join(self.sweep_c.iter().map(|c| c.to_string()).collect()),
            "sweep.variant" => self.sweep_variant.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "gen.c" => self.gen.c = num(key, v)?,
            "gen.b" => self.gen.b = num(key, v)?,
            "gen.seed" => self.gen.seed = num(key, v)?,
            "gen.digits" => {
                self.gen.digit_source = if v == "synthetic" {
                    DigitSource::SyntheticGlyphs
                } else if let Some(paths) = v.strip_prefix("mnist:") {
                    let (images, labels) = paths
                        .split_once(',')
                        .ok_or_else(|| bad(key, v, "expected mnist:IMAGES,LABELS"))?;
                    DigitSource::MnistIdx {
                        images: PathBuf::from(images.trim()),
                        labels: PathBuf::from(labels.trim()),
                    }
                } else {
                    return Err(bad(key, v, "expected synthetic or mnist:IMAGES,LABELS"));
                }
            }
            "enc.d" => self.encoder.d = num(key, v)?,
            "enc.token_seed" => self.encoder.token_seed = num(key, v)?,
            "enc.feature_version" => self.encoder.feature_version = num(key, v)?,
            "map.p" => self.mapping.p = num(key, v)?,
            "map.adapter_alpha" => self.mapping.adapter_alpha = num(key, v)?,
            "map.tau" => self.mapping.tau = num(key, v)?,
            "map.normalize" => self.mapping.normalize = boolean(key, v)?,
            "map.lr" => self.map_train.lr = num(key, v)?,
            "map.batch_size" => self.map_train.batch_size = num(key, v)?,
            "map.epochs" => self.map_train.epochs = num(key, v)?,
            "map.seed" => self.map_train.seed = num(key, v)?,
            "map.optimizer" => self.map_train.optimizer = optimizer(key, v)?,
            "assign.epsilon" => self.assign.epsilon = num(key, v)?,
            "assign.mode" => {
                self.assign.mode = match v {
                    "attr_to_regions" => AssignMode::AttrToRegions,
                    "region_to_argmax_attr" => AssignMode::RegionToArgmaxAttr,
                    _ => return Err(bad(key, v, "expected attr_to_regions or region_to_argmax_attr")),
                }
            }
            "assign.zs_epsilon" => self.zs_epsilon = num(key, v)?,
            "vlm.lr" => self.vlm.lr = num(key, v)?,
            "vlm.batch_size" => self.vlm.batch_size = num(key, v)?,
            "vlm.max_epochs" => self.vlm.max_epochs = num(key, v)?,
            "vlm.patience" => self.vlm.patience = num(key, v)?,
            "vlm.tau" => self.vlm.tau = num(key, v)?,
            "vlm.seed" => self.vlm.seed = num(key, v)?,
            "vlm.optimizer" => self.vlm.optimizer = optimizer(key, v)?,
            "vlm.mask_same_image" => self.vlm.mask_same_image = boolean(key, v)?,
            "vlm.variants" => {
                let mut vs = list(v).map(|s| variant(key, s)).collect::<Result<Vec<_>>>()?;
                vs.sort();
                vs.dedup();
                self.variants = vs;
            }
            "eval.test_images" => self.eval.test_images = num(key, v)?,
            "eval.test_seed" => self.eval.test_seed = num(key, v)?,
            "eval.random_seed" => self.eval.random_seed = num(key, v)?,
            "eval.seeds" => self.eval.seeds = num(key, v)?,
            "sweep.c" => self.sweep_c = list(v).map(|s| num(key, s)).collect::<Result<_>>()?,
            "sweep.variant" => self.sweep_variant = variant(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?}: expected key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Lines for every key starting with one of `prefixes`.
    pub fn section(&self, prefixes: &[&str]) -> String {
        let mut out = String::new();
        for key in KEYS.iter().filter(|k| prefixes.iter().any(|p| k.starts_with(p))) {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.section(&[""])
    }

    pub fn hash(&self) -> String {
        hex_sha256(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.map_train.validate()?;
        self.assign.validate()?;
        AssignConfig::attr_to_regions(self.zs_epsilon).validate()?;
        self.vlm.validate()?;
        if self.encoder.d < 8 {
            return Err(Error::InvalidConfig(format!("enc.d = {} must be >= 8", self.encoder.d)));
        }
        if self.eval.test_images == 0 || self.eval.seeds == 0 {
            return Err(Error::InvalidConfig(
                "eval.test_images and eval.seeds must be >= 1".into(),
            ));
        }
        if self.sweep_c.len() < 2 {
            return Err(Error::InvalidConfig("sweep.c needs at least two values".into()));
        }
        Ok(())
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("gen.c", "5").unwrap();
        cfg.set("vlm.variants", "villa, ft_img").unwrap();
        cfg.set("gen.digits", "mnist:a.idx,b.idx").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(back.variants, vec![VlmVariant::FtImg, VlmVariant::Villa]);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::parse("# x\n\n gen.b = 500 \n").unwrap();
        assert_eq!(cfg.gen.b, 500);
        assert!(matches!(RunConfig::parse("gen.q = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("gen.c = abc"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("gen.c 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("vlm.variants = clip"), Err(Error::Config(_))));
    }

    #[test]
    fn every_key_reads_back() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let mut other = RunConfig::default();
            other.set(key, &cfg.get(key).unwrap()).unwrap();
            assert_eq!(other, cfg, "{key}");
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_split_keys() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.section(&["gen."]).lines().count(), 4);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    proptest! {
        #[test]
        fn hash_tracks_values(c in 2.0f64..36.0, seed in any::<u64>()) {
            let mut a = RunConfig::default();
            a.set("gen.c", &c.to_string()).unwrap();
            a.set("gen.seed", &seed.to_string()).unwrap();
            let b = RunConfig::parse(&a.to_text()).unwrap();
            prop_assert_eq!(a.hash(), b.hash());
            let mut c2 = b.clone();
            c2.set("gen.seed", &seed.wrapping_add(1).to_string()).unwrap();
            prop_assert_ne!(a.hash(), c2.hash());
        }
    }
}
