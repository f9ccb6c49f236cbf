//! Run configuration: one JSON document holding every knob, resolved
//! before a command starts and written into the output directory so a
//! run can be reproduced from its own artifacts.

use std::fs;
use std::path::Path;

use bamrl_core::attack::{AttackConfig, DEFAULT_EPSILON_GRID};
use bamrl_core::env::EnvConfig;
use bamrl_core::policy::ArchitectureConfig;
use bamrl_core::ppo::TrainConfig;
use bamrl_core::recovery::RecoveryConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Evaluation knobs: episode count, attack sweep, and parallelism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Episodes per regime per attack strength.
    pub episodes: usize,
    /// Attack strengths swept; one report per entry.
    pub epsilon_grid: Vec<f64>,
    /// Worker threads for episode evaluation. Results are independent of
    /// the worker count; 1 keeps wall-clock behaviour serial too.
    pub workers: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 10,
            epsilon_grid: DEFAULT_EPSILON_GRID.to_vec(),
            workers: 1,
        }
    }
}

/// The fully merged configuration a command runs from. Defaults cover
/// every field, a config file overrides the defaults, and command-line
/// flags override the file field-by-field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub architecture: ArchitectureConfig,
    pub environment: EnvConfig,
    pub training: TrainConfig,
    /// Evaluation-time attack; adversarial training carries its own copy
    /// under `training.adv_training`.
    pub attack: AttackConfig,
    pub recovery: RecoveryConfig,
    pub evaluation: EvalSettings,
    /// Master seed: copied into `training.seed` when the config resolves
    /// and the base for evaluation episode seeds.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            architecture: ArchitectureConfig::nature_lite(3, true),
            environment: EnvConfig::default(),
            training: TrainConfig::default(),
            attack: AttackConfig::default(),
            recovery: RecoveryConfig::default(),
            evaluation: EvalSettings::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by the config file when one is given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Failure::usage(format!(
                "config {}: schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                path.display(),
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Propagates the master seed and checks every section plus the
    /// architecture/environment agreement. Call after flag overrides.
    pub fn resolve(&mut self) -> Result<(), Failure> {
        self.training.seed = self.seed;
        self.architecture.validate().map_err(Failure::usage)?;
        self.environment.validate().map_err(Failure::usage)?;
        self.training.validate().map_err(Failure::usage)?;
        self.attack.validate().map_err(Failure::usage)?;
        if self.evaluation.episodes == 0 {
            return Err(Failure::usage("evaluation.episodes must be positive"));
        }
        if self.evaluation.workers == 0 {
            return Err(Failure::usage("evaluation.workers must be positive"));
        }
        for &eps in &self.evaluation.epsilon_grid {
            if !eps.is_finite() || eps < 0.0 {
                return Err(Failure::usage(format!(
                    "evaluation.epsilon_grid entry {eps} must be finite and non-negative"
                )));
            }
        }
        let [frames, h, w] = self.environment.observation_shape();
        let a = &self.architecture;
        if (a.input_frames, a.input_height, a.input_width) != (frames, h, w) {
            return Err(Failure::usage(format!(
                "architecture expects {}x{}x{} input but the environment emits {frames}x{h}x{w}",
                a.input_frames, a.input_height, a.input_width
            )));
        }
        Ok(())
    }

    /// Pretty JSON, newline-terminated, for provenance files.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the resolved config into the run directory.
    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        fs::write(path, self.to_json())
            .map_err(|e| Failure::runtime(format!("write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let mut cfg = RunConfig::default();
        cfg.resolve().unwrap();
        assert_eq!(cfg.training.seed, 0);
        assert_eq!(cfg.evaluation.epsilon_grid, DEFAULT_EPSILON_GRID.to_vec());
    }

    #[test]
    fn master_seed_reaches_training() {
        let mut cfg = RunConfig {
            seed: 99,
            ..RunConfig::default()
        };
        cfg.resolve().unwrap();
        assert_eq!(cfg.training.seed, 99);
    }

    #[test]
    fn roundtrips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.evaluation.episodes = 3;
        let text = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"no_such_field": 1}"#).unwrap_err();
        assert!(err.to_string().contains("no_such_field"));
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 5, "evaluation": {"episodes": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.evaluation.episodes, 2);
        assert_eq!(cfg.evaluation.workers, 1);
        assert_eq!(cfg.training.rollout_len, TrainConfig::default().rollout_len);
    }

    #[test]
    fn mismatched_observation_shape_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.environment.stack = 2;
        let err = cfg.resolve().unwrap_err();
        assert!(err.message().contains("environment emits"));
    }

    #[test]
    fn empty_grid_passes_config_validation() {
        // The eval command rejects an empty sweep; the config itself may
        // hold one (a training-only config never reads it).
        let mut cfg = RunConfig::default();
        cfg.evaluation.epsilon_grid.clear();
        cfg.resolve().unwrap();
    }
}
