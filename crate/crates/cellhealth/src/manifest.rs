//! Run manifests: what ran, with which configuration and seed, on which
//! inputs, producing which outputs.
//!
//! The creation time is the only field that differs between two identical
//! runs; [`reproducible_view`] drops it. Wall-clock measurements go to a
//! separate timing file and are never part of the manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL: &str = "cellhealth";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// SHA-256 of a file, recorded under `label`.
pub fn digest_file(path: &Path, label: impl Into<String>) -> io::Result<FileDigest> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        bytes += n as u64;
        hasher.update(&buf[..n]);
    }
    Ok(FileDigest {
        path: label.into(),
        bytes,
        sha256: format!("{:x}", hasher.finalize()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    /// Seeds handed to each module, derived from `seed`.
    pub child_seeds: BTreeMap<String, u64>,
    /// The resolved configuration after flags were applied.
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory, sorted.
    pub outputs: Vec<FileDigest>,
    /// RFC 3339, UTC.
    pub created_at: String,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Manifest text without `created_at`, for comparing runs.
pub fn reproducible_view(manifest_json: &str) -> serde_json::Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(manifest_json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("created_at");
    }
    serde_json::to_string_pretty(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub subcommand: String,
    pub wall_clock_s: f64,
    /// Named stages in execution order.
    pub stages: Vec<(String, f64)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, b"abc").unwrap();
        let d = digest_file(&p, "abc.txt").unwrap();
        assert_eq!(d.bytes, 3);
        assert_eq!(d.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn timestamp_is_excluded_from_comparison() {
        let mut m = Manifest {
            tool: TOOL.into(),
            version: "0.1.0".into(),
            subcommand: "synth".into(),
            seed: 1,
            child_seeds: BTreeMap::new(),
            config: serde_json::json!({"a": 1}),
            inputs: vec![],
            outputs: vec![],
            created_at: "2024-01-01T00:00:00Z".into(),
        };
        let a = m.to_json();
        m.created_at = "2025-06-01T12:00:00Z".into();
        let b = m.to_json();
        assert_ne!(a, b);
        assert_eq!(reproducible_view(&a).unwrap(), reproducible_view(&b).unwrap());
        m.seed = 2;
        assert_ne!(reproducible_view(&a).unwrap(), reproducible_view(&m.to_json()).unwrap());
    }
}
