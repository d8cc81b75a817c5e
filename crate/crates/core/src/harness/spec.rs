use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{IntegrationOptions, System};
use crate::error::{Error, Result};
use crate::stability::Tolerances;

/// Largest `n` accepted by exhaustive scans.
pub const MAX_EXHAUSTIVE_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// One closed-form test per `(k, n1)`, weighted by `C(n, n1)`.
    Exhaustive,
    /// Every sign pattern separately, each checked on its assembled Jacobian.
    ExhaustiveRaw,
    /// Random `(k, pattern)` draws.
    Sample(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub jsonl: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

/// Complete description of a census or scan; a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub system: System,
    pub d: usize,
    pub n: usize,
    pub beta: f64,
    pub instances: usize,
    pub runs_per_instance: usize,
    pub seed: u64,
    pub integration: IntegrationOptions,
    pub tolerances: Tolerances,
    pub scan: Option<ScanMode>,
    pub output: OutputPaths,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            system: System::SelfAttention,
            d: 3,
            n: 10,
            beta: 1.0,
            instances: 1,
            runs_per_instance: 1,
            seed: 0,
            integration: IntegrationOptions::default(),
            tolerances: Tolerances::default(),
            scan: None,
            output: OutputPaths::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::contract(format!("d must be at least 2, got {}", self.d)));
        }
        if self.n == 0 {
            return Err(Error::contract("n must be at least 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::contract(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.instances == 0 {
            return Err(Error::contract("instances must be at least 1"));
        }
        if self.runs_per_instance == 0 {
            return Err(Error::contract("runs_per_instance must be at least 1"));
        }
        if matches!(self.scan, Some(ScanMode::Exhaustive | ScanMode::ExhaustiveRaw))
            && self.n > MAX_EXHAUSTIVE_N
        {
            return Err(Error::contract(format!(
                "exhaustive scans need n <= {MAX_EXHAUSTIVE_N}, got {}",
                self.n
            )));
        }
        self.integration.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}
