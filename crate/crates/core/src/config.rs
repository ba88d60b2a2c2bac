//! Run configuration files.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::experiments::StudyConfig;
use crate::problem::ControlProblem;
use crate::reference::GridSpec;
use crate::trainer::TrainConfig;
use crate::util::sha256_hex;
use crate::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Everything a command needs: the control problem plus optional training,
/// study and reference-grid sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub problem: ControlProblem<f64>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub study: Option<StudyConfig>,
    #[serde(default)]
    pub reference: Option<GridSpec>,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            problem: ControlProblem::decumulation(),
            train: None,
            study: None,
            reference: None,
            paths: Paths::default(),
        }
    }
}

impl RunConfigFile {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        if let Some(s) = &self.study {
            s.validate()?;
        }
        if let Some(g) = &self.reference {
            g.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate(t.batch_size)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("serializable"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_and_hash_is_stable() {
        let c = RunConfigFile::default();
        c.validate().unwrap();
        let s = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfigFile = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
        assert_eq!(c.content_hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfigFile::default()).unwrap();
        v["paths"]["outt"] = serde_json::json!("x");
        assert!(serde_json::from_value::<RunConfigFile>(v).is_err());
    }
}
