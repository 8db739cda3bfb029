//! The run configuration tree: one JSON document drives every command.
//!
//! Unknown keys are rejected. Dotted-path overrides edit single leaves.
//! The run seed fans out to every stage at resolution time, so the
//! resolved document written beside a run's outputs pins the exact seeds
//! used.

use serde::{Deserialize, Serialize};

use crate::classify::ProbeConfig;
use crate::detect::DetectTrainConfig;
use crate::mim::PretrainConfig;
use crate::phantom::DatasetSpec;
use crate::volume::PreprocessParams;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override path {0:?} does not address an existing leaf")]
    BadOverridePath(String),
    #[error("override {0:?} must be key=value")]
    BadOverrideSyntax(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Numeric precision for training runs. Verification tooling always uses
/// 64-bit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> voxdet_tensor::DType {
        match self {
            Precision::F32 => voxdet_tensor::DType::F32,
            Precision::F64 => voxdet_tensor::DType::F64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; the CLI `--out` flag and VOXDET_OUT_DIR override.
    pub out_dir: Option<String>,
    /// Worker-thread cap for future parallel sections; everything in the
    /// current implementation is single-threaded regardless.
    pub threads: Option<usize>,
    pub precision: Precision,
    pub phantom: DatasetSpec,
    pub preprocess: PreprocessParams,
    pub pretrain: PretrainConfig,
    pub detect: DetectTrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    /// Parse JSON text, apply `key=value` dotted overrides, fan the run
    /// seed out to every stage, and validate strictly.
    pub fn resolve(body: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut value: serde_json::Value =
            serde_json::from_str(body).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.phantom.seed = cfg.seed;
        cfg.pretrain.seed = cfg.seed;
        cfg.detect.seed = cfg.seed;
        cfg.probe.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn apply_override(value: &mut serde_json::Value, ov: &str) -> Result<(), ConfigError> {
    let Some((path, raw)) = ov.split_once('=') else {
        return Err(ConfigError::BadOverrideSyntax(ov.to_string()));
    };
    let mut cursor = &mut *value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| ConfigError::BadOverridePath(path.to_string()))?;
        if i + 1 == segments.len() {
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert((*seg).to_string(), parsed);
            return Ok(());
        }
        // Sparse configs rely on defaults; materialize the path as we go.
        // Typos still fail strict deserialization afterwards.
        cursor = obj
            .entry((*seg).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(ConfigError::BadOverridePath(path.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_seed_fanout() {
        let cfg = RunConfig::resolve("{\"seed\": 7}", &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.phantom.seed, 7);
        assert_eq!(cfg.pretrain.seed, 7);
        assert_eq!(cfg.detect.seed, 7);
        assert_eq!(cfg.probe.seed, 7);
        let text = cfg.to_pretty_json();
        let back = RunConfig::resolve(&text, &[]).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::resolve("{\"sed\": 7}", &[]).unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
        let err = RunConfig::resolve("{\"detect\": {\"schedle\": {}}}", &[]).unwrap_err();
        assert!(err.to_string().contains("schedle"), "{err}");
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::resolve(
            "{}",
            &[
                "seed=9".to_string(),
                "detect.schedule.total_epochs=4".to_string(),
                "precision=\"f64\"".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.detect.schedule.total_epochs, 4);
        assert_eq!(cfg.precision, Precision::F64);
        // Bad paths are rejected with the offending key named.
        let err = RunConfig::resolve("{}", &["detect.nope.x=1".to_string()]).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
        // Typo in the final segment is caught by strict deserialization.
        assert!(RunConfig::resolve("{}", &["detect.schedle=3".to_string()]).is_err());
    }
}
