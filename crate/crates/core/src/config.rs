//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! eta = 0.05
//! lambda = 0.001
//! c_i = 0.7
//! c_d = 0.1
//! alpha = 0.2
//! rank = 20
//! max_epochs = 200
//! tol = 1e-6
//! reg_mode = analytic          # or paper
//! first_visit_derivative = zero  # or literal
//! stop_metric = rmse           # or mae
//! ratios = 0.6,0.2,0.2
//! seed = 42
//! repeats = 1
//! clamp = false
//! scale = 10                   # or `off`
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_model::Hyperparams;
use crate::sparse_tensor::ScalingParams;

pub const KEYS: &[&str] = &[
    "eta",
    "lambda",
    "c_i",
    "c_d",
    "alpha",
    "rank",
    "max_epochs",
    "tol",
    "reg_mode",
    "first_visit_derivative",
    "stop_metric",
    "ratios",
    "seed",
    "repeats",
    "clamp",
    "scale",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub hyper: Hyperparams,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub repeats: usize,
    pub clamp: bool,
    /// Target maximum for linear scaling; `None` trains on raw values.
    pub scale: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hyper: Hyperparams::default(),
            ratios: [0.6, 0.2, 0.2],
            seed: 42,
            repeats: 1,
            clamp: false,
            scale: Some(ScalingParams::DEFAULT_TARGET_MAX),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::InvalidParameter(format!(
            "`{key}`: expected true/false, got `{value}`"
        ))),
    }
}

pub fn parse_ratios(value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse("ratios", p.trim()))
        .collect::<Result<_>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| {
        Error::InvalidParameter(format!("`ratios`: expected three values, got `{value}`"))
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let h = &mut self.hyper;
        match key {
            "eta" => h.eta = parse(key, value)?,
            "lambda" => h.lambda = parse(key, value)?,
            "c_i" => h.c_i = parse(key, value)?,
            "c_d" => h.c_d = parse(key, value)?,
            "alpha" => h.alpha = parse(key, value)?,
            "rank" => h.rank = parse(key, value)?,
            "max_epochs" => h.max_epochs = parse(key, value)?,
            "tol" => h.tol = parse(key, value)?,
            "reg_mode" => h.reg_mode = value.parse()?,
            "first_visit_derivative" => h.first_visit_derivative = value.parse()?,
            "stop_metric" => h.stop_metric = value.parse()?,
            "ratios" => self.ratios = parse_ratios(value)?,
            "seed" => self.seed = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "clamp" => self.clamp = parse_bool(key, value)?,
            "scale" => {
                self.scale = match value {
                    "off" | "none" | "false" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "unknown config key `{key}`"
                )))
            }
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        crate::sparse_tensor::SplitSets::new(0, self.ratios, 0)?;
        if self.repeats == 0 {
            return Err(Error::InvalidParameter("repeats must be at least 1".into()));
        }
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter("scale must be positive".into()));
            }
        }
        Ok(())
    }

    /// Renders the configuration in the same format [`from_text`](Self::from_text) reads.
    pub fn to_text(&self) -> String {
        let h = &self.hyper;
        let scale = self.scale.map_or("off".to_string(), |s| s.to_string());
        let pairs: [(&str, String); 16] = [
            ("eta", h.eta.to_string()),
            ("lambda", h.lambda.to_string()),
            ("c_i", h.c_i.to_string()),
            ("c_d", h.c_d.to_string()),
            ("alpha", h.alpha.to_string()),
            ("rank", h.rank.to_string()),
            ("max_epochs", h.max_epochs.to_string()),
            ("tol", format!("{:e}", h.tol)),
            ("reg_mode", h.reg_mode.to_string()),
            ("first_visit_derivative", h.first_visit_derivative.to_string()),
            ("stop_metric", h.stop_metric.to_string()),
            (
                "ratios",
                format!("{},{},{}", self.ratios[0], self.ratios[1], self.ratios[2]),
            ),
            ("seed", self.seed.to_string()),
            ("repeats", self.repeats.to_string()),
            ("clamp", self.clamp.to_string()),
            ("scale", scale),
        ];
        pairs
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
