//! Run configuration: a TOML file plus `--key value` overrides.
//!
//! Override keys use dots for nested tables (`--loss.beta 0.5`). Values are
//! read as TOML literals when they parse as one and as strings otherwise.

use std::path::{Path, PathBuf};

use gdpo_core::corpus::{Task, TaskSpec};
use gdpo_core::objectives::{LossConfig, Method};
use gdpo_core::policy::NeuralDims;
use gdpo_core::rewards::RewardConfig;
use serde::{Deserialize, Serialize};

use crate::error::{DriverError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub beta: f64,
    pub lambda_cpo: f64,
    pub delta_slic: f64,
    pub lambda_orpo: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            beta: d.beta,
            lambda_cpo: d.lambda_cpo,
            delta_slic: d.delta_slic,
            lambda_orpo: d.lambda_orpo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingDefaults {
    pub temperature: f64,
    pub top_p: f64,
    pub n: usize,
}

impl Default for SamplingDefaults {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            n: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: PathBuf,
    pub data: PathBuf,
    pub method: Method,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Falls back to [`default_epochs`] for the method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Falls back to [`default_lr`] for the method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Used instead of `lr` when training SFT.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft_lr: Option<f64>,
    /// Used instead of `epochs` when training SFT.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft_epochs: Option<usize>,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    #[serde(default)]
    pub model: NeuralDims,
    #[serde(default)]
    pub loss: LossParams,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub sampling: SamplingDefaults,
}

fn default_batch_size() -> usize {
    64
}

fn default_warmup_ratio() -> f64 {
    0.1
}

fn default_heldout() -> f64 {
    0.1
}

pub fn default_epochs(method: Method) -> usize {
    match method {
        Method::Orpo => 3,
        _ => 1,
    }
}

pub fn default_lr(method: Method) -> f64 {
    match method {
        Method::Sft => 1e-5,
        _ => 5e-6,
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(DriverError::io(path))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            DriverError::Config(msg) => DriverError::format(path, msg),
            other => other,
        })
    }

    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| DriverError::Config(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| DriverError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_method(&self, method: Method) -> Self {
        let mut c = self.clone();
        c.method = method;
        c
    }

    pub fn epochs(&self) -> usize {
        let stage = match self.method {
            Method::Sft => self.sft_epochs.or(self.epochs),
            _ => self.epochs,
        };
        stage.unwrap_or_else(|| default_epochs(self.method))
    }

    pub fn lr(&self) -> f64 {
        let stage = match self.method {
            Method::Sft => self.sft_lr.or(self.lr),
            _ => self.lr,
        };
        stage.unwrap_or_else(|| default_lr(self.method))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            method: self.method,
            beta: self.loss.beta,
            lambda_cpo: self.loss.lambda_cpo,
            delta_slic: self.loss.delta_slic,
            lambda_orpo: self.loss.lambda_orpo,
            reward: self.reward,
        }
    }

    pub fn checkpoint_path(&self, method: Method) -> PathBuf {
        self.out_dir.join(format!("{}.ckpt.json", method.name()))
    }

    pub fn sft_path(&self) -> PathBuf {
        self.sft_checkpoint
            .clone()
            .unwrap_or_else(|| self.checkpoint_path(Method::Sft))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DriverError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == Some(0) || self.sft_epochs == Some(0) {
            return bad("epochs must be at least 1");
        }
        for lr in [self.lr, self.sft_lr].into_iter().flatten() {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("lr must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("heldout_fraction must lie in (0, 1)");
        }
        if self.model.embed_dim == 0 || self.model.window == 0 || self.model.hidden == 0 {
            return bad("model dimensions must be positive");
        }
        if self.sampling.n == 0 {
            return bad("sampling.n must be at least 1");
        }
        self.loss_config().validate()?;
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(DriverError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| DriverError::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Splits trailing `--key value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    if !args.len().is_multiple_of(2) {
        return Err(DriverError::Config(format!(
            "override {:?} has no value",
            args[args.len() - 1]
        )));
    }
    args.chunks(2)
        .map(|kv| {
            let key = kv[0]
                .strip_prefix("--")
                .ok_or_else(|| DriverError::Config(format!("expected --key, got {:?}", kv[0])))?;
            Ok((key.to_string(), kv[1].clone()))
        })
        .collect()
}

pub fn load_task(path: &Path) -> Result<Task> {
    let text = std::fs::read_to_string(path).map_err(DriverError::io(path))?;
    let spec: TaskSpec = toml::from_str(&text).map_err(|e| DriverError::format(path, e))?;
    Ok(Task::new(spec)?)
}
