use std::path::Path;

use gdpo_core::numerics::OptimState;
use gdpo_core::policy::{NeuralPolicy, PolicyDoc};
use gdpo_core::rng::Stream;
use gdpo_core::scalar::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{DriverError, Result};

pub const FORMAT: &str = "gdpo-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimDoc {
    pub step: u64,
    pub m: Vec<String>,
    pub v: Vec<String>,
}

impl OptimDoc {
    pub fn from_state(state: &OptimState<f64>) -> Self {
        Self {
            step: state.step,
            m: state.m.iter().map(|x| x.to_hex()).collect(),
            v: state.v.iter().map(|x| x.to_hex()).collect(),
        }
    }

    pub fn to_state(&self) -> Result<OptimState<f64>> {
        let parse = |xs: &[String]| -> Result<Vec<f64>> {
            xs.iter()
                .map(|s| f64::from_hex(s).map_err(|e| DriverError::Config(format!("optimizer state: {e}"))))
                .collect()
        };
        Ok(OptimState {
            m: parse(&self.m)?,
            v: parse(&self.v)?,
            step: self.step,
        })
    }
}

/// Everything needed to resume or evaluate a run, with exact floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub policy: PolicyDoc,
    pub optimizer: OptimDoc,
    pub rng: Stream,
    pub config: RunConfig,
}

impl Checkpoint {
    pub fn new(
        policy: &NeuralPolicy<f64>,
        symbols: String,
        optim: &OptimState<f64>,
        rng: Stream,
        config: RunConfig,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            step: optim.step,
            policy: policy.to_doc(Some(symbols)),
            optimizer: OptimDoc::from_state(optim),
            rng,
            config,
        }
    }

    pub fn policy(&self) -> Result<NeuralPolicy<f64>> {
        Ok(NeuralPolicy::from_doc(&self.policy)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if c.format != FORMAT {
            return Err(format!("unsupported checkpoint format {:?}", c.format));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(DriverError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(DriverError::io(path))?;
        Self::from_json(&text).map_err(|m| DriverError::format(path, m))
    }
}
