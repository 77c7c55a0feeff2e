//! Run configuration as flat dotted `key = value` pairs.
//!
//! Every key has a default; a config file only lists the overrides. Lines
//! starting with `#` are comments. The same pairs are written into every
//! run manifest, so a manifest alone reproduces the run.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{ScaleMode, UfaSettings, UfaTarget};
use crate::error::{Error, Result};
use crate::memory::{NeighborCount, ReencodeSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of each encoder block.
    pub widths: Vec<usize>,
    /// Whether each block halves the spatial resolution.
    pub downsample: Vec<bool>,
    pub decoder_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    pub fold: usize,
    pub k_shot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UfaConfig {
    pub enabled: bool,
    pub gamma: f64,
    pub target: UfaTarget,
    pub scale_mode: ScaleMode,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsmConfig {
    pub enabled: bool,
    pub num_vectors: usize,
    pub k: NeighborCount,
    pub temperature: f64,
    pub loss_mean: bool,
    pub recon_weight: f64,
    pub detach_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub per_episode_iou: bool,
    pub kshot_retrain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ufa: UfaConfig,
    pub csm: CsmConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            data: DataConfig {
                classes: 12,
                samples_per_class: 200,
                image_size: 64,
            },
            model: ModelConfig {
                widths: vec![8, 16, 16, 16],
                downsample: vec![true, true, false, false],
                decoder_hidden: 32,
            },
            train: TrainConfig {
                epochs: 50,
                episodes_per_epoch: 256,
                batch_size: 8,
                lr: 0.05,
                momentum: 0.9,
                grad_clip: 5.0,
                fold: 0,
                k_shot: 1,
            },
            ufa: UfaConfig {
                enabled: true,
                gamma: crate::augment::DEFAULT_GAMMA,
                target: UfaTarget::QueryOnly,
                scale_mode: ScaleMode::Variance,
                positions: vec![1, 2],
            },
            csm: CsmConfig {
                enabled: true,
                num_vectors: crate::memory::DEFAULT_NUM_VECTORS,
                k: NeighborCount::All,
                temperature: 1.0,
                loss_mean: true,
                recon_weight: 1.0,
                detach_features: true,
            },
            eval: EvalConfig {
                episodes: 600,
                per_episode_iou: false,
                kshot_retrain: true,
            },
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "threads",
    "data.classes",
    "data.samples_per_class",
    "data.image_size",
    "model.widths",
    "model.downsample",
    "model.decoder_hidden",
    "train.epochs",
    "train.episodes_per_epoch",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.grad_clip",
    "train.fold",
    "train.k_shot",
    "ufa.enabled",
    "ufa.gamma",
    "ufa.target",
    "ufa.scale_mode",
    "ufa.positions",
    "csm.enabled",
    "csm.num_vectors",
    "csm.k",
    "csm.temperature",
    "csm.loss_mean",
    "csm.recon_weight",
    "csm.detach_features",
    "eval.episodes",
    "eval.per_episode_iou",
    "eval.kshot_retrain",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let v = v.trim().trim_start_matches('[').trim_end_matches(']');
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one dotted key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "data.classes" => self.data.classes = parse(key, value)?,
            "data.samples_per_class" => self.data.samples_per_class = parse(key, value)?,
            "data.image_size" => self.data.image_size = parse(key, value)?,
            "model.widths" => self.model.widths = parse_list(key, value)?,
            "model.downsample" => {
                self.model.downsample = parse_list::<String>(key, value)?
                    .iter()
                    .map(|s| parse_bool(key, s))
                    .collect::<Result<_>>()?
            }
            "model.decoder_hidden" => self.model.decoder_hidden = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.episodes_per_epoch" => self.train.episodes_per_epoch = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, value)?,
            "train.fold" => self.train.fold = parse(key, value)?,
            "train.k_shot" => self.train.k_shot = parse(key, value)?,
            "ufa.enabled" => self.ufa.enabled = parse_bool(key, value)?,
            "ufa.gamma" => self.ufa.gamma = parse(key, value)?,
            "ufa.target" => {
                self.ufa.target = match value.trim() {
                    "query_only" => UfaTarget::QueryOnly,
                    "both" => UfaTarget::Both,
                    _ => return Err(Error::Config(format!("ufa.target must be query_only|both, got `{value}`"))),
                }
            }
            "ufa.scale_mode" => {
                self.ufa.scale_mode = match value.trim() {
                    "variance" => ScaleMode::Variance,
                    "stddev" => ScaleMode::Stddev,
                    _ => return Err(Error::Config(format!("ufa.scale_mode must be variance|stddev, got `{value}`"))),
                }
            }
            "ufa.positions" => self.ufa.positions = parse_list(key, value)?,
            "csm.enabled" => self.csm.enabled = parse_bool(key, value)?,
            "csm.num_vectors" => self.csm.num_vectors = parse(key, value)?,
            "csm.k" => self.csm.k = value.parse()?,
            "csm.temperature" => self.csm.temperature = parse(key, value)?,
            "csm.loss_mean" => self.csm.loss_mean = parse_bool(key, value)?,
            "csm.recon_weight" => self.csm.recon_weight = parse(key, value)?,
            "csm.detach_features" => self.csm.detach_features = parse_bool(key, value)?,
            "eval.episodes" => self.eval.episodes = parse(key, value)?,
            "eval.per_episode_iou" => self.eval.per_episode_iou = parse_bool(key, value)?,
            "eval.kshot_retrain" => self.eval.kshot_retrain = parse_bool(key, value)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// All keys with their current values, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let target = match self.ufa.target {
            UfaTarget::QueryOnly => "query_only",
            UfaTarget::Both => "both",
        };
        let scale = match self.ufa.scale_mode {
            ScaleMode::Variance => "variance",
            ScaleMode::Stddev => "stddev",
        };
        let values = [
            self.seed.to_string(),
            self.threads.to_string(),
            self.data.classes.to_string(),
            self.data.samples_per_class.to_string(),
            self.data.image_size.to_string(),
            join(&self.model.widths),
            join(&self.model.downsample),
            self.model.decoder_hidden.to_string(),
            self.train.epochs.to_string(),
            self.train.episodes_per_epoch.to_string(),
            self.train.batch_size.to_string(),
            self.train.lr.to_string(),
            self.train.momentum.to_string(),
            self.train.grad_clip.to_string(),
            self.train.fold.to_string(),
            self.train.k_shot.to_string(),
            self.ufa.enabled.to_string(),
            self.ufa.gamma.to_string(),
            target.to_string(),
            scale.to_string(),
            join(&self.ufa.positions),
            self.csm.enabled.to_string(),
            self.csm.num_vectors.to_string(),
            self.csm.k.to_string(),
            self.csm.temperature.to_string(),
            self.csm.loss_mean.to_string(),
            self.csm.recon_weight.to_string(),
            self.csm.detach_features.to_string(),
            self.eval.episodes.to_string(),
            self.eval.per_episode_iou.to_string(),
            self.eval.kshot_retrain.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Reads a key-value file, or the `config` object of a JSON run manifest.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let obj = v
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| Error::Config(format!("{}: no `config` object", path.display())))?;
            let mut cfg = Self::default();
            for (k, val) in obj {
                let s = val
                    .as_str()
                    .map(str::to_string)
                    .unwrap_or_else(|| val.to_string());
                cfg.set(k, &s)?;
            }
            cfg.validate()?;
            return Ok(cfg);
        }
        let cfg = Self::from_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// JSON object of the dotted pairs.
    pub fn to_json_map(&self) -> serde_json::Map<String, serde_json::Value> {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| (k, serde_json::Value::String(v)))
            .collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn ufa_settings(&self) -> UfaSettings {
        UfaSettings {
            gamma: self.ufa.gamma,
            target: self.ufa.target,
            scale_mode: self.ufa.scale_mode,
        }
    }

    pub fn reencode_settings(&self) -> ReencodeSettings {
        ReencodeSettings {
            k: self.csm.k,
            temperature: self.csm.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let blocks = self.model.widths.len();
        if blocks == 0 || self.model.widths.contains(&0) {
            return bad("model.widths must list positive block widths".into());
        }
        if self.model.downsample.len() != blocks {
            return bad(format!(
                "model.downsample has {} entries for {blocks} blocks",
                self.model.downsample.len()
            ));
        }
        if let Some(&p) = self.ufa.positions.iter().find(|&&p| p >= blocks) {
            return bad(format!("ufa.positions: block {p} does not exist ({blocks} blocks)"));
        }
        if !(self.ufa.gamma > 0.0) {
            return bad(format!("ufa.gamma must be > 0, got {}", self.ufa.gamma));
        }
        if self.csm.num_vectors == 0 {
            return bad("csm.num_vectors must be >= 1".into());
        }
        if let NeighborCount::Top(k) = self.csm.k {
            if k > self.csm.num_vectors {
                return bad(format!("csm.k = {k} exceeds csm.num_vectors = {}", self.csm.num_vectors));
            }
        }
        if !(self.csm.temperature > 0.0) {
            return bad("csm.temperature must be > 0".into());
        }
        if self.train.batch_size == 0 || self.train.k_shot == 0 || self.model.decoder_hidden == 0 {
            return bad("batch size, k_shot and decoder width must be >= 1".into());
        }
        if self.train.fold > 3 {
            return bad(format!("train.fold must be in 0..4, got {}", self.train.fold));
        }
        if self.data.classes < 8 || self.data.classes % 4 != 0 {
            return bad(format!(
                "data.classes must be a multiple of 4 and at least 8, got {}",
                self.data.classes
            ));
        }
        let factor: usize = self
            .model
            .downsample
            .iter()
            .map(|&d| if d { 2 } else { 1 })
            .product();
        if self.data.image_size % factor != 0 || self.data.image_size < factor {
            return bad(format!(
                "image size {} is not divisible by the encoder stride {factor}",
                self.data.image_size
            ));
        }
        Ok(())
    }

    /// Spatial reduction between image and final feature map.
    pub fn feature_stride(&self) -> usize {
        self.model
            .downsample
            .iter()
            .map(|&d| if d { 2 } else { 1 })
            .product()
    }
}
