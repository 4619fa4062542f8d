//! Run configuration: a flat, typed key-value document.
//!
//! Every hyperparameter lives in one struct with schema-checked parsing.
//! Unknown keys are rejected so a typo in `beta` or `tau` fails loudly
//! instead of silently training with a default.

use crate::data::{AugmentPolicy, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fewshot::EmbedSource;
use crate::graph::BackboneSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Learning-rate schedule shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Step,
    Cosine,
}

/// The full training configuration. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Data source: `synthetic` or `cifar100`. No default; must be set.
    pub dataset: String,
    /// Seed for dataset generation and splits, separate from the model seed
    /// so multi-seed comparisons share their data.
    pub data_seed: u64,
    pub classes: usize,
    pub resolution: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub shift: usize,
    pub contrast_jitter: f64,
    /// Fraction of train labels flipped to a wrong class (synthetic only).
    pub label_noise: f64,
    /// `none` or `standard` (pad-crop plus horizontal flip).
    pub augment: String,
    /// Fraction of the training set held out for model selection.
    pub validation_fraction: f64,

    /// Number of jointly trained peers.
    pub peers: usize,
    pub share_stem: bool,
    pub stage_widths: Vec<usize>,
    /// Dimension of the unit-normalized contrastive embedding.
    pub embed_dim: usize,
    /// Linear layers in the projection head.
    pub proj_depth: usize,
    /// How many trailing stages stay peer-private.
    pub branch_stages: usize,

    /// Softening temperature for the distillation term.
    pub temperature: f64,
    /// Weight of the contrastive term; zero disables it and the banks.
    pub beta: f64,
    /// Similarity temperature of the matching probability.
    pub tau: f64,
    /// Negatives drawn per anchor.
    pub negatives: usize,
    /// Distill the ensemble into the deployment peer.
    pub distill: bool,
    /// Block the distillation gradient from reaching the ensemble side.
    pub kl_detach: bool,
    /// Memory-bank blend factor.
    pub rho: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `constant`, `step`, or `cosine`.
    pub schedule: String,
    /// Epochs at which a step schedule decays.
    pub lr_milestones: Vec<usize>,
    /// Multiplicative decay at each milestone.
    pub lr_gamma: f64,

    /// Model seed: initialization, shuffling, sampling.
    pub seed: u64,
    /// Representation fed to episodic evaluation: `gap` or `head`.
    pub embed_source: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: String::new(),
            data_seed: 7,
            classes: 10,
            resolution: 32,
            channels: 3,
            train_per_class: 500,
            test_per_class: 100,
            noise: 0.7,
            shift: 2,
            contrast_jitter: 0.3,
            label_noise: 0.0,
            augment: "standard".to_string(),
            validation_fraction: 0.0,
            peers: 4,
            share_stem: true,
            stage_widths: vec![16, 32, 64],
            embed_dim: 128,
            proj_depth: 2,
            branch_stages: 2,
            temperature: 3.0,
            beta: 0.025,
            tau: 0.1,
            negatives: 256,
            distill: true,
            kl_detach: true,
            rho: 0.5,
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: "cosine".to_string(),
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
            seed: 0,
            embed_source: "gap".to_string(),
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("field '{field}': {msg}"))
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    /// Set one field from its config-file key and a string value, as given
    /// on the command line.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| field_err(key, e))
        }
        fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
            if value.trim().is_empty() {
                return Ok(Vec::new());
            }
            value
                .split(',')
                .map(|p| p.trim().parse().map_err(|e| field_err(key, e)))
                .collect()
        }
        match key {
            "dataset" => self.dataset = value.to_string(),
            "data_seed" => self.data_seed = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "train_per_class" => self.train_per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "shift" => self.shift = parse(key, value)?,
            "contrast_jitter" => self.contrast_jitter = parse(key, value)?,
            "label_noise" => self.label_noise = parse(key, value)?,
            "augment" => self.augment = value.to_string(),
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "peers" => self.peers = parse(key, value)?,
            "share_stem" => self.share_stem = parse(key, value)?,
            "stage_widths" => self.stage_widths = parse_list(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "proj_depth" => self.proj_depth = parse(key, value)?,
            "branch_stages" => self.branch_stages = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "negatives" => self.negatives = parse(key, value)?,
            "distill" => self.distill = parse(key, value)?,
            "kl_detach" => self.kl_detach = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "schedule" => self.schedule = value.to_string(),
            "lr_milestones" => self.lr_milestones = parse_list(key, value)?,
            "lr_gamma" => self.lr_gamma = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "embed_source" => self.embed_source = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Check every field; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        match self.dataset.as_str() {
            "synthetic" | "cifar100" => {}
            "" => return Err(field_err("dataset", "required, set to synthetic or cifar100")),
            other => {
                return Err(field_err(
                    "dataset",
                    format!("unknown dataset '{other}' (expected synthetic or cifar100)"),
                ))
            }
        }
        if self.classes < 2 {
            return Err(field_err("classes", "need at least 2"));
        }
        if self.channels == 0 {
            return Err(field_err("channels", "must be positive"));
        }
        if self.dataset == "synthetic" && (self.train_per_class == 0 || self.test_per_class == 0) {
            return Err(field_err("train_per_class", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(field_err("label_noise", "must lie in [0, 1)"));
        }
        if !(0.0..=0.9).contains(&self.validation_fraction) {
            return Err(field_err("validation_fraction", "must lie in [0, 0.9]"));
        }
        self.augment_policy()?;
        self.embed_source()?;
        self.schedule()?;

        let joint = self.distill || self.beta > 0.0;
        if joint && self.peers < 2 {
            return Err(field_err(
                "peers",
                "need at least 2 when distillation or the contrastive term is on",
            ));
        }
        if self.peers == 0 {
            return Err(field_err("peers", "must be positive"));
        }
        self.backbone_spec().validate().map_err(|e| match e {
            Error::InvalidInput(msg) => Error::Config(msg),
            other => other,
        })?;

        if self.temperature <= 0.0 {
            return Err(field_err("temperature", "must be positive"));
        }
        if self.beta < 0.0 {
            return Err(field_err("beta", "must be nonnegative"));
        }
        if self.tau <= 0.0 {
            return Err(field_err("tau", "must be positive"));
        }
        if self.beta > 0.0 && self.negatives == 0 {
            return Err(field_err("negatives", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(field_err("rho", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(field_err("batch_size", "must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(field_err("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(field_err("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(field_err("weight_decay", "must be nonnegative"));
        }
        if self.lr_gamma <= 0.0 {
            return Err(field_err("lr_gamma", "must be positive"));
        }
        if self.schedule == "step" && self.lr_milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(field_err("lr_milestones", "must be nondecreasing"));
        }
        Ok(())
    }

    pub fn augment_policy(&self) -> Result<AugmentPolicy> {
        self.augment
            .parse()
            .map_err(|_| field_err("augment", "expected none or standard"))
    }

    pub fn embed_source(&self) -> Result<EmbedSource> {
        self.embed_source
            .parse()
            .map_err(|_| field_err("embed_source", "expected gap or head"))
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match self.schedule.as_str() {
            "constant" => Ok(Schedule::Constant),
            "step" => Ok(Schedule::Step),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(field_err("schedule", "expected constant, step, or cosine")),
        }
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            in_channels: self.channels,
            resolution: self.resolution,
            stage_widths: self.stage_widths.clone(),
            classes: self.classes,
            embed_dim: self.embed_dim,
            proj_depth: self.proj_depth,
            branch_stages: self.branch_stages,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            resolution: self.resolution,
            channels: self.channels,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            noise: self.noise,
            shift: self.shift,
            contrast_jitter: self.contrast_jitter,
            label_noise: self.label_noise,
            seed: self.data_seed,
        }
    }

    /// Learning rate for the given epoch under the configured schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule().expect("validated schedule") {
            Schedule::Constant => self.lr,
            Schedule::Step => {
                let decays = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
                self.lr * self.lr_gamma.powi(decays as i32)
            }
            Schedule::Cosine => {
                if self.epochs == 0 {
                    return self.lr;
                }
                let t = epoch as f64 / self.epochs as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}
