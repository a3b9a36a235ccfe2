use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};

const WEIGHT_TOL: f64 = 1e-9;

/// Logistic classifier training parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierParams {
    pub l2_lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub min_pos: usize,
    pub min_neg: usize,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            l2_lambda: 1e-4,
            tol: 1e-8,
            max_iter: 100,
            min_pos: 5,
            min_neg: 5,
        }
    }
}

/// Weights, budget and thresholds for one selection round.
///
/// The fused score is `alpha * lius + gamma * rcsp + beta * (cwie + rcdi)`
/// with `alpha + d = 1` and `2 * beta + gamma = d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub d: f64,
    pub budget_b: usize,
    pub iou_prenms: f64,
    pub iou_tp: f64,
    pub classifier: ClassifierParams,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            alpha: 0.9,
            beta: 0.04,
            gamma: 0.02,
            d: 0.1,
            budget_b: 100,
            iou_prenms: 0.5,
            iou_tp: 0.5,
            classifier: ClassifierParams::default(),
            seed: 0,
        }
    }
}

fn config_err(keys: &str, msg: impl Into<String>) -> PalError {
    PalError::Config {
        keys: keys.to_string(),
        msg: msg.into(),
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("d", self.d),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(key, format!("weight must be finite and >= 0, got {v}")));
            }
        }
        if (self.alpha + self.d - 1.0).abs() > WEIGHT_TOL {
            return Err(config_err(
                "alpha, d",
                format!("alpha+d must equal 1, got {}", self.alpha + self.d),
            ));
        }
        if (2.0 * self.beta + self.gamma - self.d).abs() > WEIGHT_TOL {
            return Err(config_err(
                "beta, gamma, d",
                format!(
                    "2*beta+gamma must equal d, got {} vs d = {}",
                    2.0 * self.beta + self.gamma,
                    self.d
                ),
            ));
        }
        if self.budget_b < 1 {
            return Err(config_err("budget_b", "budget_b must be at least 1"));
        }
        for (key, v) in [("iou_prenms", self.iou_prenms), ("iou_tp", self.iou_tp)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(config_err(key, format!("threshold must lie in (0, 1), got {v}")));
            }
        }
        let c = &self.classifier;
        if !(c.l2_lambda >= 0.0 && c.l2_lambda.is_finite()) {
            return Err(config_err("classifier.l2_lambda", "must be finite and >= 0"));
        }
        if !(c.tol > 0.0) {
            return Err(config_err("classifier.tol", "must be positive"));
        }
        if c.max_iter == 0 {
            return Err(config_err("classifier.max_iter", "must be at least 1"));
        }
        Ok(())
    }

    /// Parses a TOML (or, for `.json` paths, JSON) document. Keys outside the
    /// selection schema are rejected except for a `simulation` table, which is
    /// left for the simulator to read.
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        let mut table: toml::Table = if json {
            serde_json::from_str(text).map_err(|e| config_err("-", e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| config_err("-", e.to_string()))?
        };
        table.remove("simulation");
        let cfg: SelectionConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err("-", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<SelectionConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PalError::io(path, e))?;
    SelectionConfig::from_str_with_format(&text, is_json(path))
        .map_err(|e| e.context(format!("loading config {}", path.display())))
}
