//! Run configuration and its validation.
//!
//! A configuration file is TOML with four sections, `[federation]`, `[task]`,
//! `[attack]` (optional) and `[defense]`. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::defense::DefenseConfig;
use crate::detection::TaskConfig;
use crate::error::{Error, Result};

/// One violated invariant, named by the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl Violation {
    pub fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self { field, message: message.into() }
    }
}

/// Confidence levels accepted by the uncertainty zones, with their
/// standard-deviation multipliers.
pub const CONFIDENCE_LEVELS: [(f64, f64); 3] = [(0.68, 1.0), (0.95, 2.0), (0.99, 3.0)];

/// Standard-deviation multiplier for a confidence level, if supported.
pub fn z_for_confidence(confidence: f64) -> Option<f64> {
    CONFIDENCE_LEVELS
        .iter()
        .find(|(c, _)| (c - confidence).abs() < 1e-9)
        .map(|&(_, z)| z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub participation_fraction: f64,
    pub malicious_fraction: f64,
    /// Rounds per forensic window.
    pub forensic_window: usize,
    pub confidence_level: f64,
    /// Temporal window (omega) of the temporal signature.
    pub temporal_window: usize,
    pub watchlist_threshold: u32,
    pub master_seed: u64,
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Mini-batch size for local SGD; absent means full batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 100,
            rounds: 200,
            participation_fraction: 0.10,
            malicious_fraction: 0.20,
            forensic_window: 10,
            confidence_level: 0.99,
            temporal_window: 1,
            watchlist_threshold: 2,
            master_seed: 0,
            local_epochs: 1,
            learning_rate: 0.05,
            batch_size: None,
        }
    }
}

impl FederationConfig {
    /// Number of malicious clients, `m * N`.
    pub fn malicious_count(&self) -> usize {
        (self.malicious_fraction * self.num_clients as f64).round() as usize
    }

    pub fn z(&self) -> f64 {
        z_for_confidence(self.confidence_level).unwrap_or(3.0)
    }

    fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.num_clients == 0 {
            v.push(Violation::new("federation.num_clients", "N must be positive"));
        }
        if self.rounds == 0 {
            v.push(Violation::new("federation.rounds", "T must be positive"));
        }
        let k = self.participation_fraction;
        if !(k > 0.0 && k <= 1.0) {
            v.push(Violation::new(
                "federation.participation_fraction",
                "k must lie in (0, 1]",
            ));
        } else if (self.num_clients as f64) * k < 2.0 - 1e-9 {
            v.push(Violation::new("federation.participation_fraction", "N·k < 2"));
        }
        let m = self.malicious_fraction;
        if !(0.0..0.5).contains(&m) {
            v.push(Violation::new("federation.malicious_fraction", "m must be < 0.5 and >= 0"));
        } else {
            let count = m * self.num_clients as f64;
            if (count - count.round()).abs() > 1e-9 {
                v.push(Violation::new(
                    "federation.malicious_fraction",
                    format!("m·N = {count} is not an integer count of clients"),
                ));
            }
        }
        if self.forensic_window < 2 {
            v.push(Violation::new("federation.forensic_window", "W must be >= 2"));
        }
        if z_for_confidence(self.confidence_level).is_none() {
            v.push(Violation::new(
                "federation.confidence_level",
                "confidence must be one of 0.68, 0.95, 0.99",
            ));
        }
        if self.temporal_window == 0 {
            v.push(Violation::new("federation.temporal_window", "omega must be >= 1"));
        }
        if self.watchlist_threshold == 0 {
            v.push(Violation::new("federation.watchlist_threshold", "must be positive"));
        }
        if self.local_epochs == 0 {
            v.push(Violation::new("federation.local_epochs", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            v.push(Violation::new("federation.learning_rate", "must be a positive real"));
        }
        if self.batch_size == Some(0) {
            v.push(Violation::new("federation.batch_size", "must be positive"));
        }
        v
    }
}

/// Returns the configuration unchanged when every invariant holds, otherwise
/// every violated invariant.
pub fn validate_config(config: FederationConfig) -> Result<FederationConfig> {
    let violations = config.violations();
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(Error::InvalidConfig(violations))
    }
}

/// The full contents of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    #[serde(default)]
    pub defense: DefenseConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Validates every section; all violations are reported together.
    pub fn validate(self) -> Result<Self> {
        let mut v = self.federation.violations();
        v.extend(self.task.violations());
        if let Some(attack) = &self.attack {
            v.extend(attack.violations(self.task.classes));
        }
        v.extend(self.defense.violations());
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(err: Error) -> Vec<&'static str> {
        match err {
            Error::InvalidConfig(v) => v.into_iter().map(|x| x.field).collect(),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn reference_protocol_is_valid() {
        let cfg = FederationConfig {
            num_clients: 100,
            participation_fraction: 0.10,
            rounds: 200,
            malicious_fraction: 0.20,
            forensic_window: 10,
            confidence_level: 0.99,
            ..FederationConfig::default()
        };
        assert_eq!(validate_config(cfg.clone()).unwrap(), cfg);
    }

    #[test]
    fn too_few_participants() {
        let cfg = FederationConfig {
            num_clients: 10,
            participation_fraction: 0.05,
            malicious_fraction: 0.2,
            ..FederationConfig::default()
        };
        let err = validate_config(cfg).unwrap_err();
        assert!(err.to_string().contains("N·k < 2"), "{err}");
    }

    #[test]
    fn malicious_fraction_must_stay_below_half() {
        let cfg = FederationConfig { malicious_fraction: 0.5, ..FederationConfig::default() };
        let err = validate_config(cfg).unwrap_err();
        assert!(err.to_string().contains("m must be < 0.5"), "{err}");
    }

    #[test]
    fn non_integral_malicious_count_rejected() {
        let cfg = FederationConfig {
            num_clients: 30,
            participation_fraction: 0.2,
            malicious_fraction: 0.25,
            ..FederationConfig::default()
        };
        assert_eq!(fields(validate_config(cfg).unwrap_err()), vec!["federation.malicious_fraction"]);
    }

    #[test]
    fn every_violation_is_reported() {
        let cfg = FederationConfig {
            forensic_window: 1,
            temporal_window: 0,
            confidence_level: 0.9,
            learning_rate: 0.0,
            ..FederationConfig::default()
        };
        let f = fields(validate_config(cfg).unwrap_err());
        assert_eq!(
            f,
            vec![
                "federation.forensic_window",
                "federation.confidence_level",
                "federation.temporal_window",
                "federation.learning_rate"
            ]
        );
    }

    #[test]
    fn validation_is_idempotent() {
        let cfg = FederationConfig::default();
        let once = validate_config(cfg).unwrap();
        let twice = validate_config(once.clone()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[federation]\nnum_clients = 10\nbogus = 1\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
        let text = "[mystery]\nx = 1\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
