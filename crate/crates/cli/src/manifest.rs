//! Run manifests: what was run, with which settings, and what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects written files and their hashes for one command invocation.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<OutputFile>,
}

impl OutputDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Write `bytes` to `rel` under the output root and record its hash.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.written.push(OutputFile {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Write `manifest.txt` and `manifest.json`; neither is listed in itself.
    pub fn finish(
        self,
        command: &str,
        config: Vec<(String, String)>,
        seeds: Vec<u64>,
        elapsed: Duration,
    ) -> std::io::Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seeds,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: elapsed.as_secs_f64(),
            outputs: self.written,
        };
        let mut txt = String::new();
        txt.push_str(&format!("command={}\n", manifest.command));
        txt.push_str(&format!("tool_version={}\n", manifest.tool_version));
        txt.push_str(&format!("wall_clock_seconds={}\n", manifest.wall_clock_seconds));
        let seeds: Vec<String> = manifest.seeds.iter().map(u64::to_string).collect();
        txt.push_str(&format!("seeds={}\n", seeds.join(",")));
        for (k, v) in &manifest.config {
            txt.push_str(&format!("config.{k}={v}\n"));
        }
        for f in &manifest.outputs {
            txt.push_str(&format!("output.{}={}\n", f.path, f.sha256));
        }
        fs::write(self.root.join("manifest.txt"), txt)?;
        let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        fs::write(self.root.join("manifest.json"), json + "\n")?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
