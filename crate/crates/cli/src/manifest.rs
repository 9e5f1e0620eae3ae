//! Run manifests: everything needed to repeat a run bit for bit.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const SEED_ENV: &str = "THRESHCOX_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub arguments: Vec<String>,
    /// SHA-256 of the resolved configuration below, serialized as compact JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub seed_from_env: bool,
    pub inputs: Vec<InputFile>,
    pub threads: usize,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub threshcox: String,
    pub os: String,
    pub arch: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            threshcox: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed from the environment, if set; a malformed value is an error.
pub fn seed_override() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| anyhow::anyhow!("{SEED_ENV}='{v}' is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64, seed_from_env: bool) -> anyhow::Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        Ok(Self {
            command: command.into(),
            arguments: std::env::args().skip(1).collect(),
            config_hash,
            config,
            seed,
            seed_from_env,
            inputs: Vec::new(),
            threads: rayon::current_num_threads(),
            versions: Versions::default(),
        })
    }

    pub fn with_input(mut self, path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::io::write_text(&dir.join("manifest.json"), &text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_only_on_config() {
        let a = Manifest::new("fit", &serde_json::json!({"seed": 1, "x": [1.5]}), 1, false).unwrap();
        let b = Manifest::new("fit", &serde_json::json!({"seed": 1, "x": [1.5]}), 1, false).unwrap();
        let c = Manifest::new("fit", &serde_json::json!({"seed": 2, "x": [1.5]}), 2, false).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
