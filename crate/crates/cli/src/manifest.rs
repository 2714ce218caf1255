//! Run manifests: written before any other output, hashed over their
//! content, and echoed into every artifact so mismatched inputs can be
//! caught downstream.
//!
//! Hash inputs never contain absolute paths — only file names and upstream
//! manifest hashes — so reruns into different directories stay
//! byte-identical.

use crate::error::{CliError, CliResult};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A manifest is an ordered map of parameters describing one command run.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    /// Parameters that define the run's identity (hashed).
    pub context: BTreeMap<String, Value>,
    /// Informational parameters excluded from the hash (e.g. the split an
    /// eval ran on, so all splits of one model share a records hash).
    pub info: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut context = BTreeMap::new();
        context.insert("command".to_string(), Value::String(command.to_string()));
        context.insert(
            "tool_version".to_string(),
            Value::String(TOOL_VERSION.to_string()),
        );
        RunManifest {
            command: command.to_string(),
            context,
            info: BTreeMap::new(),
        }
    }

    pub fn ctx(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.context.insert(key.to_string(), value.into());
        self
    }

    pub fn note(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.info.insert(key.to_string(), value.into());
        self
    }

    /// SHA-256 of the canonical context JSON (BTreeMap gives key order).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.context).expect("context serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the manifest JSON (context, info, and the hash) to `path`.
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let value = serde_json::json!({
            "manifest_hash": self.hash(),
            "context": self.context,
            "info": self.info,
        });
        std::fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
        Ok(())
    }
}

/// Reads back just the hash of a written manifest file.
pub fn read_manifest_hash(path: &Path) -> CliResult<String> {
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    value["manifest_hash"]
        .as_str()
        .map(|s| s.to_string())
        .ok_or_else(|| CliError::validation(format!("{}: missing manifest_hash", path.display())))
}
