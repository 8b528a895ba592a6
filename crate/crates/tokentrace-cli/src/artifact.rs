//! Artifact provenance: every derived JSON artifact embeds the effective
//! configuration and a content hash of its input artifact, forming a
//! verifiable chain across pipeline stages.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub input_sha256: Option<String>,
}

pub fn tool_id() -> String {
    format!("tokentrace {}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Write `payload` with an embedded `provenance` field.
pub fn write_artifact<T: Serialize>(
    path: &Path,
    payload: &T,
    config: serde_json::Value,
    input: Option<&Path>,
) -> Result<()> {
    let provenance = Provenance {
        tool: tool_id(),
        config,
        input_sha256: input.map(sha256_file).transpose()?,
    };
    let mut value = serde_json::to_value(payload).context("serialize artifact")?;
    match &mut value {
        serde_json::Value::Object(map) => {
            map.insert("provenance".into(), serde_json::to_value(&provenance)?);
        }
        other => {
            let mut map = serde_json::Map::new();
            map.insert("provenance".into(), serde_json::to_value(&provenance)?);
            map.insert("data".into(), other.take());
            value = serde_json::Value::Object(map);
        }
    }
    let text = serde_json::to_string_pretty(&value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Read an artifact's payload, ignoring its provenance envelope.
pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}
