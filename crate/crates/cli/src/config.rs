//! Resolved run configurations: defaults (or a preset), then an optional
//! JSON config file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ditm::corpus::Split;
use ditm::datagen::SynthSpec;
use ditm::gradcheck::GradCheckConfig;
use ditm::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

/// Overlay an optional JSON config file onto `base`. Nested objects merge
/// key by key; unknown keys are rejected.
pub fn resolve<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = file else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let overlay: Value = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
    let mut merged = serde_json::to_value(base).expect("config serializes");
    merge(&mut merged, overlay);
    serde_json::from_value(merged)
        .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Write `config.json` into `dir`.
pub fn echo<T: Serialize>(dir: &Path, config: &T) -> anyhow::Result<()> {
    let path = dir.join("config.json");
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn require<'a>(value: &'a Option<PathBuf>, name: &str) -> anyhow::Result<&'a Path> {
    match value {
        Some(p) => Ok(p),
        None => bail!(UsageError(format!("missing required --{name}"))),
    }
}

pub fn require_file(value: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    let p = require(value, name)?;
    if !p.is_file() {
        bail!(UsageError(format!("--{name}: no such file {}", p.display())));
    }
    Ok(p.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreRun {
    pub corpus: Option<PathBuf>,
    pub pool_split: Split,
    pub out: Option<PathBuf>,
}

impl Default for ScoreRun {
    fn default() -> Self {
        ScoreRun {
            corpus: None,
            pool_split: Split::Train,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub corpus: Option<PathBuf>,
    /// Descriptiveness table; scored from the train split when absent.
    pub table: Option<PathBuf>,
    pub image_features: Option<PathBuf>,
    pub text_features: Option<PathBuf>,
    pub split: Split,
    pub val_split: Option<Split>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Also write `checkpoint_epoch{N}.bin` every this many epochs.
    pub save_every: Option<usize>,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            corpus: None,
            table: None,
            image_features: None,
            text_features: None,
            split: Split::Train,
            val_split: None,
            out: None,
            resume: None,
            save_every: None,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub image_features: Option<PathBuf>,
    pub text_features: Option<PathBuf>,
    pub split: Split,
    /// Traversal root; the normalized centroid of the gallery texts when
    /// absent.
    pub root: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            checkpoint: None,
            corpus: None,
            image_features: None,
            text_features: None,
            split: Split::Test,
            root: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub out: Option<PathBuf>,
    pub spec: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckRun {
    pub out: Option<PathBuf>,
    pub gradcheck: GradCheckConfig,
}
