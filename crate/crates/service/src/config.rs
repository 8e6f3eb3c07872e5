//! Service configuration: a TOML file plus `BAYESCAN_*` environment
//! overrides.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! window_len = 16
//! model_path = "model.json"
//! store_path = "store"
//!
//! [policy]
//! max_prob_threshold = 0.9
//! entropy_threshold = 0.5
//!
//! [retrain]
//! epochs = 5
//! ```

use bayescan::uncertainty::DEFAULT_EVAL_SAMPLES;
use bayescan::TriagePolicy;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("environment variable {var}: cannot parse {value:?}")]
    Env { var: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Defaults for jobs started by `POST /v1/retrain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainDefaults {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the training union held out for validation.
    pub val_fraction: f64,
    /// Start from the active model's parameters instead of a fresh init.
    pub warm_start: bool,
    /// Weight draws per window when validating (Bayesian).
    pub val_samples: usize,
}

impl Default for RetrainDefaults {
    fn default() -> Self {
        RetrainDefaults {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            val_fraction: 0.1,
            warm_start: true,
            val_samples: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Frames per window `W`; must match the model input.
    pub window_len: usize,
    /// Frames between consecutive windows of one stream.
    pub stride: usize,
    pub policy: TriagePolicy,
    /// MC draws per window (Bayesian models).
    pub mc_samples: usize,
    pub seed: u64,
    /// Checkpoint served when the store holds no active model.
    pub model_path: Option<PathBuf>,
    /// Directory of the event log, snapshots and model versions. Without
    /// it the service keeps everything in memory.
    pub store_path: Option<PathBuf>,
    /// Encoded dataset that every retrain includes.
    pub base_data: Option<PathBuf>,
    /// Largest accepted frame batch (413 above).
    pub max_frames_per_request: usize,
    /// Largest accepted request body in bytes (413 above).
    pub max_body_bytes: usize,
    /// Static bearer token; `None` disables the check.
    pub api_token: Option<String>,
    /// Events between snapshots of the store.
    pub snapshot_every: usize,
    pub retrain: RetrainDefaults,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            window_len: 16,
            stride: 1,
            policy: TriagePolicy::default(),
            mc_samples: DEFAULT_EVAL_SAMPLES,
            seed: 0,
            model_path: None,
            store_path: None,
            base_data: None,
            max_frames_per_request: 4096,
            max_body_bytes: 4 << 20,
            api_token: None,
            snapshot_every: 256,
            retrain: RetrainDefaults::default(),
        }
    }
}

/// Environment variables read by [`ServiceConfig::apply_env`].
pub const ENV_VARS: [&str; 10] = [
    "BAYESCAN_BIND",
    "BAYESCAN_WINDOW_LEN",
    "BAYESCAN_TAU",
    "BAYESCAN_ETA",
    "BAYESCAN_MC_SAMPLES",
    "BAYESCAN_SEED",
    "BAYESCAN_MODEL",
    "BAYESCAN_STORE",
    "BAYESCAN_BASE_DATA",
    "BAYESCAN_TOKEN",
];

impl ServiceConfig {
    /// Read `path` (if any), then apply the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => ServiceConfig::default(),
        };
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.into(),
            msg: e.to_string(),
        })
    }

    /// Override fields from `BAYESCAN_*` variables; others are ignored.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        fn num<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::Env {
                var: var.into(),
                value: value.into(),
            })
        }
        for (var, value) in vars {
            match var.as_str() {
                "BAYESCAN_BIND" => self.bind = value,
                "BAYESCAN_WINDOW_LEN" => self.window_len = num(&var, &value)?,
                "BAYESCAN_TAU" => self.policy.max_prob_threshold = num(&var, &value)?,
                "BAYESCAN_ETA" => self.policy.entropy_threshold = num(&var, &value)?,
                "BAYESCAN_MC_SAMPLES" => self.mc_samples = num(&var, &value)?,
                "BAYESCAN_SEED" => self.seed = num(&var, &value)?,
                "BAYESCAN_MODEL" => self.model_path = Some(value.into()),
                "BAYESCAN_STORE" => self.store_path = Some(value.into()),
                "BAYESCAN_BASE_DATA" => self.base_data = Some(value.into()),
                "BAYESCAN_TOKEN" => self.api_token = Some(value),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.policy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.window_len == 0 || self.stride == 0 || self.stride > self.window_len {
            return bad(format!("window_len {} / stride {}", self.window_len, self.stride));
        }
        if self.mc_samples < 2 {
            return bad("mc_samples must be at least 2".into());
        }
        if self.max_frames_per_request == 0 || self.max_body_bytes == 0 || self.snapshot_every == 0 {
            return bad("limits must be positive".into());
        }
        let r = &self.retrain;
        if r.epochs == 0 || r.batch_size == 0 || r.lr.is_nan() || r.lr <= 0.0 || r.val_samples < 2 {
            return bad("retrain epochs, batch size, lr must be positive and val_samples >= 2".into());
        }
        if !(0.0..1.0).contains(&r.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", r.val_fraction));
        }
        Ok(())
    }
}
