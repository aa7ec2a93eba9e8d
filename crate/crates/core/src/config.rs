//! Run configuration: one flat TOML table, unknown keys rejected.
//!
//! ```toml
//! condition = "FD001"
//! use_mu = true
//! use_rho = true
//! target_scale = 100.0
//! seeds = [0, 1, 2]
//! ```
//!
//! Keys not present take the defaults of [`TrainConfig::default`];
//! `epochs` defaults to 100 on FD001/FD003 and 1000 on FD002/FD004.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cmapss::{LoadOptions, DEFAULT_DROPPED_SENSORS, DEFAULT_WINDOW_LEN};
use crate::neural::{HeadActivation, ModelShape, DEFAULT_HIDDEN};
use crate::physics::{KMeansOptions, ModalityOptions, PhysicsOptions};

pub const CONDITIONS: [&str; 4] = ["FD001", "FD002", "FD003", "FD004"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How a timestep with two modes contributes features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BimodalFeed {
    /// Mode nearest to the observed value, one column per quantity.
    Nearest,
    /// Both modes, two columns per quantity; unimodal steps repeat the mode.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub condition: String,
    pub use_mu: bool,
    pub use_rho: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: Option<usize>,
    pub seeds: Vec<u64>,
    /// Root of every random stream of a run.
    pub master_seed: u64,
    pub early_stopping: bool,
    pub val_fraction: f64,
    /// Select the best epoch on the test set instead of a validation split.
    pub paper_protocol: bool,
    pub window_len: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: usize,
    pub head_activation: HeadActivation,
    pub include_extended_zeros: bool,
    pub min_alive: usize,
    pub sse_ratio: f64,
    pub separation: f64,
    pub bimodal_feed: BimodalFeed,
    pub rul_cap: Option<f64>,
    /// Targets are divided by this before training; metrics are reported
    /// in the divided units.
    pub target_scale: f64,
    pub drop_sensors: Vec<usize>,
    /// Global gradient-norm clip, off when absent.
    pub grad_clip: Option<f64>,
    pub synth_paths: usize,
    /// Cycles per synthetic path; 0 means the full support.
    pub synth_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let modality = ModalityOptions::default();
        Self {
            condition: "FD001".into(),
            use_mu: false,
            use_rho: false,
            batch_size: 64,
            lr: 0.001,
            epochs: None,
            seeds: vec![0, 1, 2],
            master_seed: 0,
            early_stopping: true,
            val_fraction: 0.1,
            paper_protocol: false,
            window_len: DEFAULT_WINDOW_LEN,
            hidden_dim: DEFAULT_HIDDEN,
            mlp_hidden: DEFAULT_HIDDEN,
            head_activation: HeadActivation::Tanh,
            include_extended_zeros: false,
            min_alive: PhysicsOptions::default().min_alive,
            sse_ratio: modality.sse_ratio,
            separation: modality.separation,
            bimodal_feed: BimodalFeed::Nearest,
            rul_cap: None,
            target_scale: 1.0,
            drop_sensors: DEFAULT_DROPPED_SENSORS.to_vec(),
            grad_clip: None,
            synth_paths: 100,
            synth_length: 0,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words such as FD003 or nearest are taken as strings.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl TrainConfig {
    /// Parses TOML text and applies `key=value` overrides on top.
    pub fn from_toml(text: &str, origin: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: origin.to_string(),
            message,
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Parse {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
                Self::from_toml(&text, &p.display().to_string(), overrides)
            }
            None => Self::from_toml("", "<defaults>", overrides),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !CONDITIONS.contains(&self.condition.as_str()) {
            return bad(format!("condition {:?} is not one of {CONDITIONS:?}", self.condition));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} is outside (0, 1)", self.val_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.target_scale > 0.0 && self.target_scale.is_finite()) {
            return bad(format!("target_scale {} must be positive", self.target_scale));
        }
        if self.window_len == 0 || self.hidden_dim == 0 || self.mlp_hidden == 0 {
            return bad("window_len, hidden_dim and mlp_hidden must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        if matches!(self.rul_cap, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("rul_cap must be positive".into());
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.condition.as_str() {
            "FD002" | "FD004" => 1000,
            _ => 100,
        })
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            drop_ids: self.drop_sensors.clone(),
            rul_cap: self.rul_cap,
        }
    }

    pub fn physics_options(&self) -> PhysicsOptions {
        PhysicsOptions {
            include_extended_zeros: self.include_extended_zeros,
            min_alive: self.min_alive,
            modality: ModalityOptions {
                sse_ratio: self.sse_ratio,
                separation: self.separation,
                ..ModalityOptions::default()
            },
            kmeans: KMeansOptions::default(),
        }
    }

    /// Features per timestep for `n_sensors` raw columns.
    pub fn feature_dim(&self, n_sensors: usize) -> usize {
        let per = match self.bimodal_feed {
            BimodalFeed::Nearest => 1,
            BimodalFeed::Both => 2,
        };
        n_sensors * (1 + per * (self.use_mu as usize + self.use_rho as usize))
    }

    pub fn model_shape(&self, n_sensors: usize) -> ModelShape {
        ModelShape {
            input_dim: self.feature_dim(n_sensors),
            hidden_dim: self.hidden_dim,
            mlp_hidden: self.mlp_hidden,
            activation: self.head_activation,
        }
    }

    /// Same config with the ablation flags replaced.
    pub fn cell(&self, use_mu: bool, use_rho: bool) -> Self {
        Self {
            use_mu,
            use_rho,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
