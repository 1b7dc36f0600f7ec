//! Run configuration as plain `key = value` text.
//!
//! Unknown keys are rejected. Floats are written in Rust's shortest
//! round-trip form so parse → serialize → parse is the identity.

use std::fmt::Write as _;
use std::path::PathBuf;

use detalign::toydet::dataset::Scenario;
use detalign::toydet::detector::DetectorConfig;
use detalign::toydet::scene::{DomainShiftConfig, SceneConfig, NUM_CLASSES};
use detalign::toydet::train::{BackboneMethod, DecoderMethod, Placement, TrainConfig};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{key}: cannot parse `{value}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub shift: DomainShiftConfig,
    pub scene: SceneConfig,
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub channels: Vec<usize>,
    pub queries: usize,
    pub dim: usize,
    pub box_hidden: usize,
    pub disc_hidden: usize,
    pub tau: f64,
    pub lambda: f64,
    pub beta: f64,
    pub projections: usize,
    pub lr_detector: f64,
    pub lr_discriminator: f64,
    pub grl_factor: f64,
    pub freeze_discriminator: bool,
    pub placement: Placement,
    pub backbone_method: BackboneMethod,
    pub decoder_method: DecoderMethod,
    pub batch: usize,
    pub steps: u64,
    pub pretrain_steps: u64,
    pub refresh_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = Scenario::default();
        Self {
            seed: 0,
            shift: s.shift,
            scene: s.scene,
            source_train: s.source_train,
            target_train: s.target_train,
            target_test: s.target_test,
            channels: t.detector.channels.clone(),
            queries: t.detector.queries,
            dim: t.detector.dim,
            box_hidden: t.detector.box_hidden,
            disc_hidden: t.disc_hidden,
            tau: t.tau,
            lambda: t.lambda,
            beta: t.beta,
            projections: t.projections,
            lr_detector: t.lr_detector,
            lr_discriminator: t.lr_discriminator,
            grl_factor: t.grl_factor,
            freeze_discriminator: t.freeze_discriminator,
            placement: t.placement,
            backbone_method: t.backbone_method,
            decoder_method: t.decoder_method,
            batch: t.batch,
            steps: 2000,
            pretrain_steps: t.pretrain_steps,
            refresh_every: t.refresh_every,
            eval_every: 500,
            checkpoint_every: 500,
            workers: 2,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Keys that do not change what a run computes, only how far it goes and
/// where it writes. They are left out of the hash so a run can be resumed
/// with a larger step budget.
const UNHASHED: [&str; 5] = ["steps", "eval_every", "checkpoint_every", "workers", "out_dir"];

const KEYS: [&str; 39] = [
    "seed",
    "haze",
    "brightness",
    "texture_frequency",
    "texture_amplitude",
    "noise_sigma",
    "shift_seed",
    "image_size",
    "max_objects",
    "min_extent",
    "max_extent",
    "class_probs",
    "source_train",
    "target_train",
    "target_test",
    "channels",
    "queries",
    "dim",
    "box_hidden",
    "disc_hidden",
    "tau",
    "lambda",
    "beta",
    "projections",
    "lr_detector",
    "lr_discriminator",
    "grl_factor",
    "freeze_discriminator",
    "placement",
    "backbone_method",
    "decoder_method",
    "batch",
    "steps",
    "pretrain_steps",
    "refresh_every",
    "eval_every",
    "checkpoint_every",
    "workers",
    "out_dir",
];

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::Value {
                key: key.into(),
                value: value.into(),
                reason: e.to_string(),
            })
        }
        let bad = |reason: &str| ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason: reason.into(),
        };
        match key {
            "seed" => self.seed = p(key, value)?,
            "haze" => self.shift.haze = p(key, value)?,
            "brightness" => self.shift.brightness = p(key, value)?,
            "texture_frequency" => self.shift.texture_frequency = p(key, value)?,
            "texture_amplitude" => self.shift.texture_amplitude = p(key, value)?,
            "noise_sigma" => self.shift.noise_sigma = p(key, value)?,
            "shift_seed" => self.shift.seed = p(key, value)?,
            "image_size" => self.scene.size = p(key, value)?,
            "max_objects" => self.scene.max_objects = p(key, value)?,
            "min_extent" => self.scene.min_extent = p(key, value)?,
            "max_extent" => self.scene.max_extent = p(key, value)?,
            "class_probs" => {
                let v: Vec<f64> = value.split(',').map(|s| p(key, s.trim())).collect::<Result<_, _>>()?;
                self.scene.class_probs = v.try_into().map_err(|_| bad(&format!("expected {NUM_CLASSES} values")))?;
            }
            "source_train" => self.source_train = p(key, value)?,
            "target_train" => self.target_train = p(key, value)?,
            "target_test" => self.target_test = p(key, value)?,
            "channels" => {
                let v: Vec<usize> = value.split(',').map(|s| p(key, s.trim())).collect::<Result<_, _>>()?;
                if v.len() != 2 {
                    return Err(bad("expected two levels"));
                }
                self.channels = v;
            }
            "queries" => self.queries = p(key, value)?,
            "dim" => self.dim = p(key, value)?,
            "box_hidden" => self.box_hidden = p(key, value)?,
            "disc_hidden" => self.disc_hidden = p(key, value)?,
            "tau" => self.tau = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "beta" => self.beta = p(key, value)?,
            "projections" => self.projections = p(key, value)?,
            "lr_detector" => self.lr_detector = p(key, value)?,
            "lr_discriminator" => self.lr_discriminator = p(key, value)?,
            "grl_factor" => self.grl_factor = p(key, value)?,
            "freeze_discriminator" => self.freeze_discriminator = p(key, value)?,
            "placement" => self.placement = Placement::parse(value).ok_or_else(|| bad("expected none|backbone|decoder|both"))?,
            "backbone_method" => self.backbone_method = BackboneMethod::parse(value).ok_or_else(|| bad("expected oaa|ga"))?,
            "decoder_method" => self.decoder_method = DecoderMethod::parse(value).ok_or_else(|| bad("expected ota|ada"))?,
            "batch" => self.batch = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "pretrain_steps" => self.pretrain_steps = p(key, value)?,
            "refresh_every" => self.refresh_every = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "workers" => self.workers = p(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        let s = &self.shift;
        Some(match key {
            "seed" => self.seed.to_string(),
            "haze" => format!("{:?}", s.haze),
            "brightness" => format!("{:?}", s.brightness),
            "texture_frequency" => format!("{:?}", s.texture_frequency),
            "texture_amplitude" => format!("{:?}", s.texture_amplitude),
            "noise_sigma" => format!("{:?}", s.noise_sigma),
            "shift_seed" => s.seed.to_string(),
            "image_size" => self.scene.size.to_string(),
            "max_objects" => self.scene.max_objects.to_string(),
            "min_extent" => self.scene.min_extent.to_string(),
            "max_extent" => self.scene.max_extent.to_string(),
            "class_probs" => floats(&self.scene.class_probs),
            "source_train" => self.source_train.to_string(),
            "target_train" => self.target_train.to_string(),
            "target_test" => self.target_test.to_string(),
            "channels" => list(&self.channels),
            "queries" => self.queries.to_string(),
            "dim" => self.dim.to_string(),
            "box_hidden" => self.box_hidden.to_string(),
            "disc_hidden" => self.disc_hidden.to_string(),
            "tau" => format!("{:?}", self.tau),
            "lambda" => format!("{:?}", self.lambda),
            "beta" => format!("{:?}", self.beta),
            "projections" => self.projections.to_string(),
            "lr_detector" => format!("{:?}", self.lr_detector),
            "lr_discriminator" => format!("{:?}", self.lr_discriminator),
            "grl_factor" => format!("{:?}", self.grl_factor),
            "freeze_discriminator" => self.freeze_discriminator.to_string(),
            "placement" => self.placement.name().into(),
            "backbone_method" => self.backbone_method.name().into(),
            "decoder_method" => self.decoder_method.name().into(),
            "batch" => self.batch.to_string(),
            "steps" => self.steps.to_string(),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "refresh_every" => self.refresh_every.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "workers" => self.workers.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    fn render(&self, include: impl Fn(&str) -> bool) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key).filter(|_| include(key)) {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }

    pub fn serialize(&self) -> String {
        self.render(|_| true)
    }

    /// Only the keys that affect the computation; this is what checkpoints
    /// embed, so two runs differing in output directory write equal bytes.
    pub fn hashed_text(&self) -> String {
        self.render(|k| !UNHASHED.contains(&k))
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.hashed_text().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            detector: DetectorConfig {
                image_size: self.scene.size,
                channels: self.channels.clone(),
                queries: self.queries,
                dim: self.dim,
                box_hidden: self.box_hidden,
                ..DetectorConfig::default()
            },
            placement: self.placement,
            backbone_method: self.backbone_method,
            decoder_method: self.decoder_method,
            tau: self.tau,
            lambda: self.lambda,
            beta: self.beta,
            projections: self.projections,
            lr_detector: self.lr_detector,
            lr_discriminator: self.lr_discriminator,
            disc_hidden: self.disc_hidden,
            grl_factor: self.grl_factor,
            freeze_discriminator: self.freeze_discriminator,
            batch: self.batch,
            pretrain_steps: self.pretrain_steps,
            refresh_every: self.refresh_every,
            ..TrainConfig::default()
        }
    }

    /// The benchmark data is drawn from the run seed.
    pub fn scenario(&self) -> Scenario {
        Scenario {
            scene: self.scene.clone(),
            shift: self.shift,
            data_seed: self.seed,
            source_train: self.source_train,
            target_train: self.target_train,
            target_test: self.target_test,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: detalign::Error| ConfigError::Invalid(e.to_string());
        self.train_config().validate().map_err(invalid)?;
        self.scene.validate().map_err(invalid)?;
        if self.source_train == 0 || self.target_train == 0 || self.target_test == 0 {
            return Err(ConfigError::Invalid("every split needs at least one scene".into()));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be ≥ 1".into()));
        }
        let s = &self.shift;
        if [s.haze, s.brightness, s.texture_frequency, s.texture_amplitude, s.noise_sigma].iter().any(|v| !v.is_finite()) || s.noise_sigma < 0.0 {
            return Err(ConfigError::Invalid("shift parameters must be finite, noise ≥ 0".into()));
        }
        Ok(())
    }
}
