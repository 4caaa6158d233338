//! The JSON configuration file: a model block plus harness options, with
//! `--set key=value` overrides applied before parsing.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use hybrid_attn::stack::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

pub const SEED_ENV: &str = "HYBRID_ATTN_SEED";
pub const OUT_DIR_ENV: &str = "HYBRID_ATTN_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Harness {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Prompt lengths for `bench`.
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub n_decode: usize,
    pub byte_budget: Option<u64>,
    /// Sequence lengths for `memory`.
    pub memory_lengths: Vec<u64>,
    /// Bytes per cached element for `memory`; the model dtype when absent.
    pub bytes_per_elem: Option<usize>,
    pub calib_sequences: usize,
    pub calib_len: usize,
    pub held_out_sequences: usize,
    pub steps: usize,
    pub lr: f64,
    pub max_prompt_len: usize,
}

impl Default for Harness {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            lengths: vec![1024, 2048, 4096, 8192],
            repeats: 3,
            n_decode: 16,
            byte_budget: None,
            memory_lengths: vec![0, 1024, 32_768, 1_000_000],
            bytes_per_elem: None,
            calib_sequences: 4,
            calib_len: 64,
            held_out_sequences: 1,
            steps: 200,
            lr: 1e-2,
            max_prompt_len: 4096,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub harness: Harness,
}

impl CliConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| UsageError(format!("config: model: {e}")))?;
        let h = &self.harness;
        if h.repeats < 3 {
            return Err(UsageError(format!("config: harness.repeats must be at least 3, got {}", h.repeats)).into());
        }
        if h.lengths.is_empty() || h.lengths.contains(&0) || h.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(UsageError("config: harness.lengths must be positive and strictly increasing".into()).into());
        }
        if !(h.lr >= 0.0 && h.lr.is_finite()) {
            return Err(UsageError(format!("config: harness.lr must be finite and non-negative, got {}", h.lr)).into());
        }
        if h.calib_sequences == 0 || h.calib_len == 0 || h.calib_len > hybrid_attn::convert::MAX_CALIB_LEN {
            return Err(UsageError(format!(
                "config: harness.calib_sequences must be positive and harness.calib_len in 1..={}",
                hybrid_attn::convert::MAX_CALIB_LEN
            ))
            .into());
        }
        Ok(())
    }
}

/// Sets `path` (dot-separated object keys) in `root` to `raw`, read as JSON
/// when it parses and as a string otherwise.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {spec:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| UsageError(format!("--set {path}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Reads the config file (or starts from defaults), applies overrides and
/// parses. Parse errors name the offending key path.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<CliConfig> {
    let (origin, mut root) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).map_err(|e| UsageError(format!("{e:#}")))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let value: Value = serde_path_to_error::deserialize(de).map_err(|e| UsageError(format!("{}: {e}", p.display())))?;
            (p.display().to_string(), value)
        }
        None => ("<defaults>".to_string(), serde_json::to_value(CliConfig::default())?),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: CliConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        UsageError(format!("{origin}: key `{path}`: {}", e.into_inner()))
    })?;
    Ok(cfg)
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| anyhow!(UsageError(format!("{SEED_ENV}={s:?} is not an unsigned integer")))),
        Err(_) => Ok(None),
    }
}
