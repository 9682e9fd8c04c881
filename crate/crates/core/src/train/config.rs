//! Run configuration: defaults, `key=value` files and validation.

use std::path::{Path, PathBuf};

use candle_core::DType;

use crate::backbone::{BackboneSpec, BackboneVariant, WeightsSource, STRIDE_GRANULARITY};
use crate::episodes::{DatasetKind, NUM_FOLDS};
use crate::error::{config_err, Error, Result};
use crate::network::{NetworkConfig, DEFAULT_ALPHA, DEFAULT_DIM};

/// Environment variable overriding the dataset root.
pub const DATA_ROOT_ENV: &str = "TBTNET_DATA_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneVariant,
    /// Safetensors weights; seeded random weights when absent.
    pub weights: Option<PathBuf>,
    pub dataset: DatasetKind,
    pub fold: usize,
    pub shots: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Defaults to 50 (pascal) or 20 (coco) when unset.
    pub epochs: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub bi_transformer: bool,
    pub seed: u64,
    pub dim: usize,
    pub image_size: usize,
    /// Training episodes per epoch; 0 means one per training image.
    pub episodes_per_epoch: usize,
    /// Train on this many fixed episodes instead of fresh draws; 0 disables.
    pub episode_pool: usize,
    /// Size of the validation manifest; 0 disables validation.
    pub val_episodes: usize,
    /// Stop after this many optimiser steps; 0 means no limit.
    pub max_steps: usize,
    pub query_chunk: usize,
    pub double_precision: bool,
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneVariant::ResNet101,
            weights: None,
            dataset: DatasetKind::Pascal,
            fold: 0,
            shots: 1,
            batch_size: 8,
            lr: 1e-3,
            epochs: None,
            alpha: DEFAULT_ALPHA,
            beta: 0.05,
            bi_transformer: true,
            seed: 0,
            dim: DEFAULT_DIM,
            image_size: 400,
            episodes_per_epoch: 0,
            episode_pool: 0,
            val_episodes: 100,
            max_steps: 0,
            query_chunk: 512,
            double_precision: false,
            data_root: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err!("invalid value '{value}' for {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(config_err!("invalid boolean '{value}' for {key}")),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn effective_epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.dataset.default_epochs())
    }

    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        let weights = match &self.weights {
            Some(p) => WeightsSource::File(p.clone()),
            None => WeightsSource::Seed(self.seed),
        };
        BackboneSpec::new(self.backbone, weights)
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            dim: self.dim,
            bi_transformer: self.bi_transformer,
            query_chunk: self.query_chunk,
            ..NetworkConfig::new(self.backbone.block_counts())
        }
    }

    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        match key.as_str() {
            "backbone" => self.backbone = value.trim().parse()?,
            "weights" => self.weights = opt_path(value),
            "dataset" => self.dataset = value.trim().parse()?,
            "fold" => self.fold = parse(&key, value)?,
            "shots" => self.shots = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "epochs" => {
                self.epochs = match value.trim() {
                    "" | "auto" => None,
                    v => Some(parse(&key, v)?),
                }
            }
            "alpha" => self.alpha = parse(&key, value)?,
            "beta" => self.beta = parse(&key, value)?,
            "bi_transformer" => self.bi_transformer = parse_bool(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "dim" => self.dim = parse(&key, value)?,
            "image_size" => self.image_size = parse(&key, value)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse(&key, value)?,
            "episode_pool" => self.episode_pool = parse(&key, value)?,
            "val_episodes" => self.val_episodes = parse(&key, value)?,
            "max_steps" => self.max_steps = parse(&key, value)?,
            "query_chunk" => self.query_chunk = parse(&key, value)?,
            "double_precision" => self.double_precision = parse_bool(&key, value)?,
            "data_root" => self.data_root = opt_path(value),
            "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            _ => return Err(config_err!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Every setting in file order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("backbone", self.backbone.to_string()),
            ("weights", show_path(&self.weights)),
            ("dataset", self.dataset.to_string()),
            ("fold", self.fold.to_string()),
            ("shots", self.shots.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.effective_epochs().to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("bi_transformer", self.bi_transformer.to_string()),
            ("seed", self.seed.to_string()),
            ("dim", self.dim.to_string()),
            ("image_size", self.image_size.to_string()),
            ("episodes_per_epoch", self.episodes_per_epoch.to_string()),
            ("episode_pool", self.episode_pool.to_string()),
            ("val_episodes", self.val_episodes.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("query_chunk", self.query_chunk.to_string()),
            ("double_precision", self.double_precision.to_string()),
            ("data_root", show_path(&self.data_root)),
            ("output_dir", self.output_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Apply `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key=value, got '{line}'", i + 1))?;
            self.set(k, v)
                .map_err(|e| config_err!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Fill `data_root` from the environment when set there.
    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.data_root = Some(PathBuf::from(root));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.fold >= NUM_FOLDS {
            return fail(format!("fold must be in 0..{NUM_FOLDS}, got {}", self.fold));
        }
        if self.shots == 0 || self.batch_size == 0 || self.dim == 0 || self.query_chunk == 0 {
            return fail("shots, batch_size, dim and query_chunk must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0 / 3.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1/3], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if self.epochs == Some(0) {
            return fail("epochs must be positive".into());
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(STRIDE_GRANULARITY) {
            return fail(format!(
                "image_size must be >= 32 and a multiple of {STRIDE_GRANULARITY}, got {}",
                self.image_size
            ));
        }
        if matches!(self.dataset, DatasetKind::Pascal | DatasetKind::Coco) && self.data_root.is_none()
        {
            return fail(format!(
                "dataset {} needs data_root (or {DATA_ROOT_ENV})",
                self.dataset
            ));
        }
        Ok(())
    }
}
