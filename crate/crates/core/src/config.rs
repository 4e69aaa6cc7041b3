//! TOML configuration shared by `safespace serve` and the offline commands.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Secrets never appear here: only the names of environment variables
//! that hold them.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{DispatchConfig, SmtpConfig};
use crate::ping::PingConfig;
use crate::tox::ScorerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// OCR program reading image bytes on stdin and writing text to stdout.
    pub program: Option<String>,
    pub args: Vec<String>,
}


#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutboxConfig {
    pub max_attempts: u32,
    pub backoff_base_secs: u64,
    pub backoff_cap_secs: u64,
}

impl Default for OutboxConfig {
    fn default() -> Self {
        let d = DispatchConfig::default();
        Self {
            max_attempts: d.max_attempts,
            backoff_base_secs: d.backoff_base_secs,
            backoff_cap_secs: d.backoff_cap_secs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub tick_seconds: u64,
    pub grace_seconds: u64,
    pub min_interval_seconds: u64,
    /// Maximum request body for text analysis, in bytes.
    pub max_body_bytes: usize,
    /// Maximum screenshot upload, in bytes.
    pub max_image_bytes: usize,
    /// Extra questionnaire definitions served next to the bundled one.
    pub questionnaires: Vec<PathBuf>,
    pub scorer: ScorerConfig,
    pub smtp: SmtpConfig,
    pub outbox: OutboxConfig,
    pub extractor: ExtractorConfig,
}

impl Default for Config {
    fn default() -> Self {
        let ping = PingConfig::default();
        Self {
            listen: "127.0.0.1:8080".parse().expect("valid address"),
            data_dir: PathBuf::from("data"),
            tick_seconds: ping.tick_secs,
            grace_seconds: ping.grace_secs,
            min_interval_seconds: ping.min_interval_secs,
            max_body_bytes: 32 * 1024,
            max_image_bytes: 10 * 1024 * 1024,
            questionnaires: Vec::new(),
            scorer: ScorerConfig::default(),
            smtp: SmtpConfig::default(),
            outbox: OutboxConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base).map_err(|message| ConfigError::Invalid {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Parses and validates; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut config: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        config.validate()?;
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        config.data_dir = resolve(&config.data_dir);
        config.questionnaires = config.questionnaires.iter().map(|p| resolve(p)).collect();
        if let Some(lex) = &config.scorer.lexicon_path {
            config.scorer.lexicon_path = Some(resolve(lex));
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tick_seconds == 0 {
            return Err("tick_seconds must be at least 1".into());
        }
        if self.min_interval_seconds == 0 {
            return Err("min_interval_seconds must be at least 1".into());
        }
        if self.outbox.max_attempts == 0 {
            return Err("outbox.max_attempts must be at least 1".into());
        }
        if self.max_body_bytes == 0 || self.max_image_bytes == 0 {
            return Err("body limits must be positive".into());
        }
        self.scorer.validate().map_err(|e| e.to_string())?;
        if !crate::directory::is_valid_email(&self.smtp.sender) {
            return Err(format!("smtp.sender {:?} is not a valid address", self.smtp.sender));
        }
        if self.smtp.username_env.is_some() != self.smtp.password_env.is_some() {
            return Err("smtp.username_env and smtp.password_env must be set together".into());
        }
        Ok(())
    }

    pub fn ping(&self) -> PingConfig {
        PingConfig {
            min_interval_secs: self.min_interval_seconds,
            grace_secs: self.grace_seconds,
            tick_secs: self.tick_seconds,
        }
    }

    pub fn dispatch(&self) -> DispatchConfig {
        DispatchConfig {
            sender: self.smtp.sender.clone(),
            max_attempts: self.outbox.max_attempts,
            backoff_base_secs: self.outbox.backoff_base_secs,
            backoff_cap_secs: self.outbox.backoff_cap_secs,
        }
    }
}
