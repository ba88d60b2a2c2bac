//! JSON inputs and outputs. Every output embeds the resolved configuration
//! and its content hash.

use std::fs;
use std::path::Path;

use riskctl_core::config::RunConfigFile;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::failure::{Category, CliError};

#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config: RunConfigFile,
    pub config_hash: String,
    pub result: T,
}

impl<T> Artifact<T> {
    pub fn new(config: &RunConfigFile, result: T) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.content_hash(),
            result,
        }
    }
}

/// Parses `path` as `T`. Failures are reported under `category`; the
/// pointer names the flag for unreadable files and the JSON path for
/// schema errors.
pub fn read_json<T: DeserializeOwned>(path: &Path, flag: &str, category: Category) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::new(category, format!("cannot read {}: {e}", path.display())).at(flag)
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::new(category, format!("{}: {}", path.display(), e.inner())).at(if at == "." {
            flag.to_string()
        } else {
            at
        })
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

/// The run configuration at `path`, or the default decumulation setup.
pub fn load_config(path: Option<&Path>) -> Result<RunConfigFile, CliError> {
    let cfg = match path {
        Some(p) => read_json::<RunConfigFile>(p, "config", Category::Config)?,
        None => RunConfigFile::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_errors_point_at_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let mut v = serde_json::to_value(RunConfigFile::default()).unwrap();
        v["problem"]["w0"] = serde_json::json!("lots");
        fs::write(&p, v.to_string()).unwrap();
        let e = load_config(Some(&p)).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(e.pointer.as_deref(), Some("problem.w0"));
    }

    #[test]
    fn missing_file_points_at_the_flag() {
        let e = load_config(Some(Path::new("/nonexistent/c.json"))).unwrap_err();
        assert_eq!(e.pointer.as_deref(), Some("config"));
        assert_eq!(e.exit_code(), 2);
    }
}
