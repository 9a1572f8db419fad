//! Run configuration: a flat, module-prefixed JSON key space
//! (`"ppo.lr": 2e-5`) mapped onto nested, strictly-typed sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint::digest_hex;
use crate::curriculum::CurriculumConfig;
use crate::rl::PpoConfig;
use crate::rprm::RprmConfig;
use crate::sft::SftConfig;
use crate::sim::{SimConfig, SuiteConfig};

/// Environment variable that overrides `run.dir`.
pub const RUN_DIR_ENV: &str = "DESKRL_RUN_DIR";
/// Name of the resolved-config echo inside the run directory.
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` must be `section.field`")]
    BadKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("config file must be a JSON object of flat keys")]
    NotObject,
    #[error("cannot parse config {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("override `{0}` must look like key=value")]
    BadOverride(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Master seed for every random stream of the run.
    pub seed: u64,
    /// Output directory (overridden by `DESKRL_RUN_DIR`).
    pub dir: String,
    /// Free-form label stored with metrics.
    pub tag: String,
    /// Checkpoint cadence in RL iterations (0: final only).
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes_per_task: usize,
    pub seed: u64,
    /// Evaluation cadence during RL in iterations (0: never).
    pub every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub suite: SuiteConfig,
    pub sim: SimConfig,
    pub policy: PolicySection,
    pub sft: SftConfig,
    pub rprm: RprmConfig,
    pub curriculum: CurriculumConfig,
    pub ppo: PpoConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection { seed: 0, dir: "runs/default".into(), tag: String::new(), checkpoint_every: 10 },
            suite: SuiteConfig::default(),
            sim: SimConfig::default(),
            policy: PolicySection { width: 64 },
            sft: SftConfig::default(),
            rprm: RprmConfig::default(),
            curriculum: CurriculumConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalSection { episodes_per_task: 100, seed: 1_000, every: 10 },
        }
    }
}

/// Flattens a nested object one level: `{"a": {"b": 1}}` → `{"a.b": 1}`.
fn flatten(v: &Value) -> Map<String, Value> {
    let mut out = Map::new();
    for (section, fields) in v.as_object().expect("config serializes to an object") {
        for (field, value) in fields.as_object().expect("sections serialize to objects") {
            out.insert(format!("{section}.{field}"), value.clone());
        }
    }
    out
}

impl RunConfig {
    /// Applies flat `key → value` overrides on top of `self`.
    pub fn with_overrides(&self, flat: &Map<String, Value>) -> Result<Self, ConfigError> {
        let mut nested = serde_json::to_value(self).expect("serializes");
        for (key, value) in flat {
            let (section, field) = key.split_once('.').ok_or_else(|| ConfigError::BadKey(key.clone()))?;
            let slot = nested
                .get_mut(section)
                .and_then(|s| s.as_object_mut())
                .and_then(|s| s.get_mut(field))
                .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
            *slot = value.clone();
        }
        let cfg: RunConfig = serde_json::from_value(nested.clone()).map_err(|e| {
            // Name the offending key by retrying each override in isolation.
            let key = flat
                .keys()
                .find(|k| {
                    let mut base = serde_json::to_value(self).expect("serializes");
                    let (s, f) = k.split_once('.').expect("checked");
                    base[s][f] = flat[*k].clone();
                    serde_json::from_value::<RunConfig>(base).is_err()
                })
                .cloned()
                .unwrap_or_default();
            ConfigError::BadValue { key, msg: e.to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.ppo
            .validate()
            .map_err(|e| ConfigError::BadValue { key: "ppo".into(), msg: e.to_string() })?;
        let c = &self.curriculum;
        if !(c.alpha > 0.0 && c.alpha <= 1.0) || !(c.tau > 0.0) {
            return Err(ConfigError::BadValue { key: "curriculum".into(), msg: "alpha ∈ (0,1], tau > 0".into() });
        }
        if self.policy.width == 0 || self.rprm.width == 0 {
            return Err(ConfigError::BadValue { key: "policy.width".into(), msg: "must be positive".into() });
        }
        if self.sim.horizon == 0 {
            return Err(ConfigError::BadValue { key: "sim.horizon".into(), msg: "must be positive".into() });
        }
        Ok(())
    }

    /// Parses a flat config file and applies it over the defaults.
    pub fn from_flat_json(text: &str, path: &str) -> Result<Self, ConfigError> {
        let v: Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })?;
        let flat = v.as_object().ok_or(ConfigError::NotObject)?;
        Self::default().with_overrides(flat)
    }

    /// Loads `path` (or the defaults when absent) and applies `key=value`
    /// overrides. Values parse as JSON, falling back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Parse { path: p.display().to_string(), msg: e.to_string() })?;
                Self::from_flat_json(&text, &p.display().to_string())?
            }
            None => Self::default(),
        };
        let mut flat = Map::new();
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            flat.insert(k.trim().to_string(), value);
        }
        base.with_overrides(&flat)
    }

    /// Flat key space of the fully resolved config.
    pub fn to_flat(&self) -> Map<String, Value> {
        flatten(&serde_json::to_value(self).expect("serializes"))
    }

    /// Pretty flat JSON with sorted keys (the run-directory echo).
    pub fn echo(&self) -> String {
        let flat: std::collections::BTreeMap<String, Value> = self.to_flat().into_iter().collect();
        serde_json::to_string_pretty(&flat).expect("serializes") + "\n"
    }

    /// SHA-256 of the echo.
    pub fn digest(&self) -> String {
        digest_hex(self.echo().as_bytes())
    }

    /// `run.dir`, unless the environment override is set.
    pub fn run_dir(&self) -> PathBuf {
        match std::env::var_os(RUN_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => PathBuf::from(&self.run.dir),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::load(None, &["ppo.lr=3e-5".into(), "run.tag=abc".into()]).unwrap();
        assert_eq!(c.ppo.lr, 3e-5);
        assert_eq!(c.run.tag, "abc");
        let back = RunConfig::from_flat_json(&c.echo(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_ne!(RunConfig::default().digest(), c.digest());
    }

    #[test]
    fn unknown_and_bad_keys_rejected() {
        let e = RunConfig::from_flat_json(r#"{"ppo.lrr": 1}"#, "x").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey(k) if k == "ppo.lrr"));
        let e = RunConfig::from_flat_json(r#"{"nosection": 1}"#, "x").unwrap_err();
        assert!(matches!(e, ConfigError::BadKey(_)));
        let e = RunConfig::from_flat_json(r#"{"ppo.epochs": "four"}"#, "x").unwrap_err();
        assert!(matches!(e, ConfigError::BadValue { key, .. } if key == "ppo.epochs"));
        let e = RunConfig::from_flat_json(r#"{"ppo.clip_eps": 1.5}"#, "x").unwrap_err();
        assert!(matches!(e, ConfigError::BadValue { .. }));
        assert!(matches!(RunConfig::from_flat_json("[1]", "x").unwrap_err(), ConfigError::NotObject));
    }

    #[test]
    fn nested_values_override() {
        let c = RunConfig::load(None, &["suite.only=[\"goal\"]".into(), "suite.tasks_per_suite=[1,2,3,4]".into()])
            .unwrap();
        assert_eq!(c.suite.tasks_per_suite, [1, 2, 3, 4]);
        assert_eq!(c.suite.only, vec![crate::sim::SuiteId::Goal]);
    }
}
