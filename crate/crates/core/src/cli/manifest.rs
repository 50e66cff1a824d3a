//! Run manifests: which command ran, with what configuration, producing which files.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use toml::Table;

use crate::error::{Error, Result};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// `stationary`, `constants`, `predict`, `simulate-delay`, `simulate-fa` or `report`.
    pub command: String,
    pub master_seed: u64,
    pub created_unix: u64,
    /// Output file names, relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub config: Table,
}

impl Manifest {
    pub fn new(command: &str, master_seed: u64, outputs: Vec<String>, config: Table) -> Self {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            master_seed,
            created_unix,
            outputs,
            config,
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.toml")
    }

    /// Writes `manifest_<command>.toml` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let text = toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
        let path = dir.join(Self::file_name(&self.command));
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let config: Table = "[model]\nm1 = 0.5\n".parse().unwrap();
        let m = Manifest::new("predict", 7, vec!["predictions.csv".into()], config);
        let dir = tempfile::tempdir().unwrap();
        let path = m.write(dir.path()).unwrap();
        assert!(path.ends_with("manifest_predict.toml"));
        assert_eq!(Manifest::read(&path).unwrap(), m);
    }
}
