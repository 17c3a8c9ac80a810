use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of `blob <len>\0<bytes>`, the way git names blobs.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

pub fn digest_file(path: &Path) -> std::io::Result<InputDigest> {
    let bytes = fs::read(path)?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: blob_hash(&bytes),
    })
}

#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize, R: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: &'a C,
    pub inputs: Vec<InputDigest>,
    /// Hash over the config echo and the input digests.
    pub input_hash: String,
    pub verdict: &'static str,
    pub result: R,
}

impl<'a, C: Serialize, R: Serialize> Report<'a, C, R> {
    pub fn new(
        command: &'static str,
        config: &'a C,
        inputs: Vec<InputDigest>,
        pass: bool,
        result: R,
    ) -> Self {
        let mut material = serde_json::to_vec(config).expect("config serializes");
        for d in &inputs {
            material.extend_from_slice(d.path.as_bytes());
            material.push(0);
            material.extend_from_slice(d.sha256.as_bytes());
            material.push(b'\n');
        }
        Self {
            tool: "wvar",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            inputs,
            input_hash: blob_hash(&material),
            verdict: if pass { "pass" } else { "fail" },
            result,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `explicit` if given, otherwise `<out_dir>/<default>`.
pub fn output_path(out_dir: &Path, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
    match explicit {
        Some(p) => p.clone(),
        None => out_dir.join(default),
    }
}

/// Comma-separated rows with a header.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // sha256 of "blob 5\0hello"
        assert_eq!(
            blob_hash(b"hello"),
            "8aec4e4876f854f688d0ebfc8f37598f38e5fd6903cccc850ca36591175aeb60"
        );
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
        assert_eq!(blob_hash(b"").len(), 64);
    }
}
