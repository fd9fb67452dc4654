//! Run manifests: canonical JSON (sorted keys, two-space indent, trailing
//! newline) recording what a command read, wrote and how long it took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub config_digest: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
    pub version: String,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Sorted-key JSON text of `value`; identical values give identical text.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // `Value` maps are ordered, which fixes key order at every depth.
    let v = serde_json::to_value(value).expect("config serializes");
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }

    pub fn config<T: Serialize>(&mut self, value: &T) {
        self.config_digest = Some(sha256_hex(canonical_json(value).as_bytes()));
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(display(path), file_digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.insert(display(path), file_digest(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, canonical_json(self)).map_err(|e| CliError::io(path, e))
    }
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// `dataset.bin` -> `dataset.bin.manifest.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_sorts_keys() {
        #[derive(Serialize)]
        struct S {
            zeta: u32,
            alpha: BTreeMap<String, u32>,
        }
        let s = S {
            zeta: 1,
            alpha: [("b".to_string(), 2), ("a".to_string(), 3)].into_iter().collect(),
        };
        let text = canonical_json(&s);
        assert!(text.find("alpha").unwrap() < text.find("zeta").unwrap());
        assert!(text.find("\"a\"").unwrap() < text.find("\"b\"").unwrap());
        assert!(text.ends_with("}\n"));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn sidecar_appends() {
        assert_eq!(sidecar(Path::new("a/b.ds"), ".skips.csv"), PathBuf::from("a/b.ds.skips.csv"));
    }
}
