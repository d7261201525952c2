//! The run configuration file and `--set key=value` overrides.

use std::path::{Path, PathBuf};

use newscap::dataset::WindowMode;
use newscap::generation::GenConfig;
use newscap::gradsuite::GradSuiteConfig;
use newscap::model::ModelConfig;
use newscap::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Invalid;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// BPE1 vocabulary, relative to the config file.
    pub vocab: Option<PathBuf>,
    /// Split manifest overriding each example's `split`.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model initialization seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenConfig,
    pub window: WindowMode,
    pub gradcheck: GradSuiteConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generate: GenConfig::default(),
            window: WindowMode::default(),
            gradcheck: GradSuiteConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// A loaded configuration plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) }
    }
}

/// Sets `path` (dot-separated) inside `root` to `raw`, parsed as JSON when
/// possible and as a string otherwise. Intermediate objects are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), Invalid> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Invalid(format!("--set expects key=value, got {assignment:?}")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Invalid(format!("--set key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Invalid(format!("--set {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

pub fn parse(value: Value) -> Result<RunConfig, Invalid> {
    let config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Invalid(format!("config key {path}: {}", e.into_inner()))
    })?;
    validate(&config)?;
    Ok(config)
}

pub fn validate(c: &RunConfig) -> Result<(), Invalid> {
    c.model.validate().map_err(|e| Invalid(format!("model: {e}")))?;
    c.train.validate().map_err(|e| Invalid(e.to_string()))?;
    c.generate.validate().map_err(|e| Invalid(e.to_string()))?;
    if c.window.width == 0 {
        return Err(Invalid("window.width must be at least 1".into()));
    }
    Ok(())
}

/// Reads `path` (or starts from defaults when `None`), applies overrides and
/// validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Loaded> {
    let (mut value, base_dir) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("reading config {}: {e}", p.display()))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Invalid(format!("config {} is not valid JSON: {e}", p.display())))?;
            (v, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (Value::Object(Default::default()), PathBuf::from(".")),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    Ok(Loaded { config: parse(value)?, base_dir })
}
