use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Record written next to every command's outputs; contains everything
/// needed to re-run the command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub precision: String,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub inputs: serde_json::Value,
    #[serde(default)]
    pub method: Option<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, precision: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: "tomo".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            precision: precision.into(),
            seed,
            config,
            inputs: serde_json::Value::Null,
            method: None,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_NAME), text + "\n").map_err(CliError::io)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid manifest {}: {e}", path.display())))
    }
}
