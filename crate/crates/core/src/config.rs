//! JSON experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{catalog_names, model_by_name, ChainSpec, ModelDescriptor};

/// Named group of checks, run in the order listed in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Flows,
    Kernel,
    Metric,
    Calderon,
    Parametrix,
    Montecarlo,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Flows, Suite::Kernel, Suite::Metric, Suite::Calderon, Suite::Parametrix, Suite::Montecarlo];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Flows => "flows",
            Suite::Kernel => "kernel",
            Suite::Metric => "metric",
            Suite::Calderon => "calderon",
            Suite::Parametrix => "parametrix",
            Suite::Montecarlo => "montecarlo",
        }
    }

    pub fn parse(name: &str) -> Result<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| {
            let known: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
            Error::Config(format!("unknown suite {name:?}; available suites: {}", known.join(", ")))
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Catalog name or inline descriptor.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Named(String),
    Inline(ModelDescriptor),
}

impl<'de> Deserialize<'de> for ModelChoice {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        // untagged matching would hide which descriptor field is wrong
        match serde_json::Value::deserialize(deserializer)? {
            serde_json::Value::String(name) => Ok(ModelChoice::Named(name)),
            other => serde_json::from_value(other)
                .map(ModelChoice::Inline)
                .map_err(|e| serde::de::Error::custom(format!("model descriptor: {e}"))),
        }
    }
}

impl ModelChoice {
    pub fn build(&self) -> Result<ChainSpec> {
        match self {
            ModelChoice::Named(name) => model_by_name(name),
            ModelChoice::Inline(desc) => ChainSpec::from_descriptor(desc),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelChoice::Named(name) => name.clone(),
            ModelChoice::Inline(desc) => desc.name.clone().unwrap_or_else(|| "inline".into()),
        }
    }
}

/// Sample counts, grid sizes and quadrature orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    /// Monte Carlo paths per simulation
    pub paths: usize,
    /// time steps per simulation
    pub steps: usize,
    /// random configurations for sampled statistics
    pub samples: usize,
    /// uniform draws per ball-volume estimate
    pub volume_samples: usize,
    /// RK4 steps per unit time for nonlinear flows
    pub flow_steps_per_unit: usize,
    pub hermite_order: usize,
    pub legendre_order: usize,
    /// space points per axis of operator grids
    pub grid_points: usize,
    /// time points of operator grids
    pub time_points: usize,
    pub neumann_depth: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            paths: 20_000,
            steps: 256,
            samples: 10_000,
            volume_samples: 200_000,
            flow_steps_per_unit: 256,
            hermite_order: 8,
            legendre_order: 4,
            grid_points: 5,
            time_points: 3,
            neumann_depth: 1,
        }
    }
}

impl Budgets {
    fn validate(&self) -> Result<()> {
        let fields = [
            ("paths", self.paths),
            ("steps", self.steps),
            ("samples", self.samples),
            ("volume_samples", self.volume_samples),
            ("flow_steps_per_unit", self.flow_steps_per_unit),
            ("hermite_order", self.hermite_order),
            ("legendre_order", self.legendre_order),
            ("grid_points", self.grid_points),
            ("time_points", self.time_points),
            ("neumann_depth", self.neumann_depth),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("budgets.{name} must be positive")));
            }
        }
        Ok(())
    }
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    /// time horizon, in `(0, 1]`
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default)]
    pub checks: Vec<Suite>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// fill the wall_time column; off by default so reports are byte-identical
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn new(model: ModelChoice, horizon: f64, checks: Vec<Suite>) -> Self {
        ExperimentConfig {
            model,
            horizon,
            checks,
            budgets: Budgets::default(),
            seed: default_seed(),
            output_dir: None,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon <= 1.0) {
            return Err(Error::Config(format!("T = {} outside (0, 1]", self.horizon)));
        }
        self.budgets.validate()?;
        if let ModelChoice::Named(name) = &self.model {
            if !catalog_names().contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "model: unknown model {name:?}; available models: {}",
                    catalog_names().join(", ")
                )));
            }
        }
        self.model.build().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads, parses and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"model": "kolmogorov", "T": 0.5, "checks": ["kernel"]}"#).unwrap();
        assert_eq!(cfg.checks, vec![Suite::Kernel]);
        assert_eq!(cfg.budgets, Budgets::default());
        assert_eq!(cfg.seed, 1);
        assert!(!cfg.record_timing);
    }

    #[test]
    fn unknown_model_lists_catalog() {
        let err = ExperimentConfig::from_json(r#"{"model": "heston", "T": 0.5}"#).unwrap_err().to_string();
        assert!(err.contains("heston") && err.contains("kolmogorov") && err.contains("chain3"), "{err}");
    }

    #[test]
    fn horizon_above_one_is_rejected() {
        let err = ExperimentConfig::from_json(r#"{"model": "kolmogorov", "T": 1.5}"#).unwrap_err().to_string();
        assert!(err.contains("(0, 1]"), "{err}");
        assert!(ExperimentConfig::from_json(r#"{"model": "kolmogorov", "T": 0}"#).is_err());
    }

    #[test]
    fn unknown_keys_and_suites_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"model": "kolmogorov", "T": 0.5, "horizn": 1}"#).unwrap_err().to_string();
        assert!(err.contains("horizn"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"model": "kolmogorov", "T": 0.5, "checks": ["plots"]}"#).unwrap_err().to_string();
        assert!(err.contains("plots"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"model": "kolmogorov", "T": 0.5, "budgets": {"paths": 0}}"#).unwrap_err().to_string();
        assert!(err.contains("budgets.paths"), "{err}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = ExperimentConfig::from_json("{\"model\": \"kolmogorov\",\n \"T\": }").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn inline_descriptor_builds() {
        let desc = crate::model::catalog_descriptor("chain3").unwrap();
        let text = serde_json::to_string(&ExperimentConfig::new(ModelChoice::Inline(desc), 1.0, vec![])).unwrap();
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg.model.build().unwrap().n, 3);
    }

    #[test]
    fn bad_descriptor_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"model": {"name": "x", "n": 2}, "T": 0.5}"#).unwrap_err().to_string();
        assert!(err.contains("model descriptor") && err.contains("missing field"), "{err}");
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()).unwrap(), s);
        }
        assert!(Suite::parse("nope").is_err());
    }
}
