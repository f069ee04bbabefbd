//! Run manifests: the resolved command line and settings of every run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::FileConfig;

pub const RUN_MANIFEST: &str = "run.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Re-running these arguments reproduces the run.
    pub argv: Vec<String>,
    pub outputs: Vec<String>,
    pub config: Option<FileConfig>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: Option<FileConfig>) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            argv,
            outputs: Vec::new(),
            config,
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(RUN_MANIFEST);
        let text = toml::to_string(self)?;
        std::fs::write(&path, text).map_err(|e| posm_core::Error::io(&path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> anyhow::Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| posm_core::Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| posm_core::Error::Malformed { path: path.into(), reason: e.message().to_string() }.into())
    }
}

/// Flag/value pairs for the argv of a manifest.
pub(crate) fn flag(argv: &mut Vec<String>, name: &str, value: impl ToString) {
    argv.push(format!("--{name}"));
    argv.push(value.to_string());
}
