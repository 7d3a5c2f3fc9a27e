//! Run configuration: defaults, then an optional JSON file, then `--set` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cmanp::cmanp::ModelConfig;
use cmanp::tasks::GpTaskConfig;
use cmanp::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out tasks per kernel.
    pub tasks: usize,
    /// Autoregressive block sizes; 0 stands for "all targets in one block".
    pub block_sizes: Vec<usize>,
    /// `sample`, `mean` or `observed`.
    pub feedback: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tasks: 1000,
            block_sizes: vec![1, 5, 0],
            feedback: vec!["sample".into(), "observed".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Context sizes for the memory sweep.
    pub sizes: Vec<usize>,
    /// False conditions each context in a single chunk (negative control).
    pub chunked: bool,
    /// Prior context sizes for the update sweep.
    pub prior_sizes: Vec<usize>,
    /// Update size used across `prior_sizes`.
    pub update_size: usize,
    /// Update sizes for the linearity check, at the smallest prior size.
    pub update_sizes: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![256, 1024, 4096],
            chunked: true,
            prior_sizes: vec![100, 10000],
            update_size: 16,
            update_sizes: vec![64, 128, 256],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tasks: GpTaskConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            let from_file: RunConfig = serde_json::from_str(&text)
                .with_context(|| format!("invalid config file {}", path.display()))?;
            value = serde_json::to_value(from_file)?;
        }
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).context("override produced an invalid configuration")?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.tasks.validate()?;
        Ok(cfg)
    }
}

/// `a.b.c=value`; the path must already exist. Values parse as JSON, falling
/// back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| anyhow!("unknown configuration key `{key}`"))?,
            Value::Array(items) => {
                let i: usize = part.parse().map_err(|_| anyhow!("`{part}` in `{key}` is not an index"))?;
                let n = items.len();
                items.get_mut(i).ok_or_else(|| anyhow!("index {i} out of range in `{key}` (len {n})"))?
            }
            _ => bail!("`{key}` descends into a scalar"),
        };
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let same_kind = matches!(
        (&*slot, &parsed),
        (Value::Number(_), Value::Number(_))
            | (Value::Bool(_), Value::Bool(_))
            | (Value::String(_), Value::String(_))
            | (Value::Array(_), Value::Array(_))
            | (Value::Object(_), Value::Object(_))
    );
    if !same_kind {
        bail!("override `{key}` expects a value like {}, got `{raw}`", slot);
    }
    *slot = parsed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_type_check() {
        let cfg = RunConfig::load(None, &["model.k=3".into(), "model.variant=diagonal".into()]).unwrap();
        assert_eq!(cfg.model.k, 3);
        assert_eq!(cfg.model.variant, cmanp::cmanp::Variant::Diagonal);
        assert!(RunConfig::load(None, &["model.k=\"two\"".into()]).is_err());
        assert!(RunConfig::load(None, &["model.k=-1".into()]).is_err());
        assert!(RunConfig::load(None, &["model.depth=3".into()]).is_err());
        assert!(RunConfig::load(None, &["model.variant=banana".into()]).is_err());
    }

    #[test]
    fn file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"k": 1, "colour": 2}}"#).unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
        std::fs::write(&p, r#"{"model": {"k": 1}, "train": {"steps": 7}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &["train.steps=9".into()]).unwrap();
        assert_eq!((cfg.model.k, cfg.train.steps, cfg.model.d_model), (1, 9, 64));
    }
}
