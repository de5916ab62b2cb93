//! Run manifests: what produced an artifact directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::files::file_digest;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Content hash and location of an input artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    pub digest: String,
}

impl InputRef {
    /// Digest of a manifest file, which in turn records its blobs' digests.
    pub fn of_dir(dir: &Path, manifest: &str) -> Result<Self> {
        Ok(Self {
            path: dir.display().to_string(),
            digest: file_digest(&dir.join(manifest))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    #[serde(default)]
    pub inputs: BTreeMap<String, InputRef>,
    /// Fully resolved configuration of the command.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl RunInfo {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            seed,
            inputs: BTreeMap::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Self {
        self.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        self
    }

    pub fn with_input(mut self, name: &str, input: InputRef) -> Self {
        self.inputs.insert(name.into(), input);
        self
    }
}
