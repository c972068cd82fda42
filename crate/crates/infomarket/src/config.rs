//! Run configuration: one `key = value` per line, so experiment setups
//! diff cleanly. Command-line flags override file values.
//!
//! Recognized keys (all optional, defaults in `RunConfig::default`):
//! market_type, alpha, epsilon, beta, pi_click, impressions_per_period,
//! round_cap, seed, ron, tqm, currency_scale, periods_per_month, pricing,
//! and the paths trace, catalog, whitelists, ledger, output.

use crate::engine::{CpmParams, EngineError, MarketConfig, MarketType};
use crate::ledger::PricingMode;
use crate::money::Money;
use crate::valuation::{ClickModel, ValuationError};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}:{line}: expected `key = value`, got {text:?}")]
    BadLine { context: String, line: usize, text: String },
    #[error("{context}:{line}: unknown key {key:?}")]
    UnknownKey { context: String, line: usize, key: String },
    #[error("{context}:{line}: duplicate key {key:?}")]
    DuplicateKey { context: String, line: usize, key: String },
    #[error("bad value for {key}: {message}")]
    BadValue { key: String, message: String },
    #[error("{key} points at {path} which does not exist")]
    MissingFile { key: String, path: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Valuation(#[from] ValuationError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub market_type: MarketType,
    pub alpha: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub pi_click: f64,
    pub impressions_per_period: u64,
    pub round_cap: u64,
    pub seed: u64,
    pub ron: Money,
    pub tqm: f64,
    pub currency_scale: f64,
    pub periods_per_month: u64,
    pub pricing: PricingMode,
    pub trace: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub whitelists: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            market_type: MarketType::Mediated,
            alpha: 0.8,
            epsilon: 1.0,
            beta: 2.0,
            pi_click: 0.1,
            impressions_per_period: 1000,
            round_cap: 16,
            seed: 0,
            ron: Money::from_units(1),
            tqm: 1.0,
            currency_scale: 1.0,
            periods_per_month: 10,
            pricing: PricingMode::Shapley,
            trace: None,
            catalog: None,
            whitelists: None,
            ledger: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, context: &str) -> Result<RunConfig, ConfigError> {
        let mut config = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                context: context.to_string(),
                line: i + 1,
                text: line.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::DuplicateKey {
                    context: context.to_string(),
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            seen.push(key.to_string());
            config.set(key, value).map_err(|e| match e {
                ConfigError::BadValue { .. } => e,
                _ => ConfigError::UnknownKey {
                    context: context.to_string(),
                    line: i + 1,
                    key: key.to_string(),
                },
            })?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// Sets one key from its text form; the override path CLI flags use.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn bad(key: &str, message: impl std::fmt::Display) -> ConfigError {
            ConfigError::BadValue { key: key.to_string(), message: message.to_string() }
        }
        match key {
            "market_type" => self.market_type = value.parse().map_err(|e| bad(key, e))?,
            "alpha" => self.alpha = value.parse().map_err(|e| bad(key, e))?,
            "epsilon" => self.epsilon = value.parse().map_err(|e| bad(key, e))?,
            "beta" => self.beta = value.parse().map_err(|e| bad(key, e))?,
            "pi_click" => self.pi_click = value.parse().map_err(|e| bad(key, e))?,
            "impressions_per_period" => {
                self.impressions_per_period = value.parse().map_err(|e| bad(key, e))?
            }
            "round_cap" => self.round_cap = value.parse().map_err(|e| bad(key, e))?,
            "seed" => self.seed = value.parse().map_err(|e| bad(key, e))?,
            "ron" => self.ron = value.parse().map_err(|e| bad(key, e))?,
            "tqm" => self.tqm = value.parse().map_err(|e| bad(key, e))?,
            "currency_scale" => self.currency_scale = value.parse().map_err(|e| bad(key, e))?,
            "periods_per_month" => self.periods_per_month = value.parse().map_err(|e| bad(key, e))?,
            "pricing" => self.pricing = value.parse().map_err(|e| bad(key, e))?,
            "trace" => self.trace = Some(PathBuf::from(value)),
            "catalog" => self.catalog = Some(PathBuf::from(value)),
            "whitelists" => self.whitelists = Some(PathBuf::from(value)),
            "ledger" => self.ledger = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            other => {
                return Err(ConfigError::UnknownKey {
                    context: String::new(),
                    line: 0,
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Input paths must exist by the time a run starts; outputs are
    /// created, so only inputs are checked.
    pub fn check_input_paths(&self) -> Result<(), ConfigError> {
        for (key, path) in [("trace", &self.trace), ("catalog", &self.catalog), ("whitelists", &self.whitelists)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::MissingFile {
                        key: key.to_string(),
                        path: p.display().to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.market_config()?.validate()?;
        self.cpm_params()?;
        self.click_model()?;
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(ConfigError::BadValue {
                key: "beta".into(),
                message: format!("must be finite and >= 0, got {}", self.beta),
            });
        }
        if self.round_cap == 0 {
            return Err(ConfigError::BadValue { key: "round_cap".into(), message: "must be >= 1".into() });
        }
        if self.periods_per_month == 0 {
            return Err(ConfigError::BadValue {
                key: "periods_per_month".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn market_config(&self) -> Result<MarketConfig, ConfigError> {
        Ok(MarketConfig {
            market_type: self.market_type,
            alpha: self.alpha,
            epsilon: self.epsilon,
            impressions_per_period: self.impressions_per_period,
            currency_scale: self.currency_scale,
        })
    }

    pub fn cpm_params(&self) -> Result<CpmParams, ConfigError> {
        Ok(CpmParams::new(self.ron, self.tqm)?)
    }

    pub fn click_model(&self) -> Result<ClickModel, ConfigError> {
        Ok(ClickModel::new(self.pi_click)?)
    }
}
