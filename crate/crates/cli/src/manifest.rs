use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::NON_SEMANTIC;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub id: String,
    pub command: String,
    pub case_hash: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
    pub wall_time_s: f64,
    /// Units that failed, with reasons.
    pub failures: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    /// The id hashes everything that determines the outputs, so reruns with
    /// the same inputs reproduce it.
    pub fn new(command: &str, case_hash: &str, config: &BTreeMap<String, String>, seed: u64) -> Self {
        let semantic: BTreeMap<&String, &String> =
            config.iter().filter(|(k, _)| !NON_SEMANTIC.contains(&k.as_str())).collect();
        let key = serde_json::json!({
            "command": command,
            "case_hash": case_hash,
            "config": semantic,
            "seed": seed,
            "tool_version": env!("CARGO_PKG_VERSION"),
        });
        let id = sha256_hex(key.to_string().as_bytes())[..16].to_string();
        RunManifest {
            id,
            command: command.into(),
            case_hash: case_hash.into(),
            config: config.clone(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_s: 0.0,
            failures: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn header(&self) -> String {
        format!("# manifest={}\n", self.id)
    }

    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let path = dir.join(format!("manifest-{}.json", self.id));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}
