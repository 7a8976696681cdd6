//! Output directory handling: deterministic CSV and JSON writers, file
//! digests, and the run manifest that ties them together.
//!
//! Every data file embeds the config hash and the master seed; reruns of the
//! same effective config produce byte-identical data files regardless of the
//! thread count. The manifest is the one file allowed to differ between
//! reruns, and only in its timestamps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Name of the per-run manifest file; excluded from byte-identity checks.
pub const MANIFEST_NAME: &str = "run_manifest.json";

/// One data file the run produced, with its digest over the final bytes.
#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Summary of a whole run, written last.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub pass: bool,
    pub outputs: Vec<OutputRecord>,
}

/// Collects everything a run writes under one directory.
pub struct OutDir {
    root: PathBuf,
    experiment: String,
    config_hash: String,
    master_seed: u64,
    started_unix: u64,
    outputs: Vec<OutputRecord>,
}

impl OutDir {
    pub fn create(root: &Path, experiment: &str, config_hash: u64, master_seed: u64) -> Result<Self> {
        fs::create_dir_all(root)
            .with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            experiment: experiment.to_string(),
            config_hash: format!("{config_hash:016x}"),
            master_seed,
            started_unix: unix_now(),
            outputs: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hash_hex(&self) -> &str {
        &self.config_hash
    }

    /// Write a CSV file: an identity preamble in comment lines, extra
    /// per-file keys, then the header and rows.
    pub fn write_csv(
        &mut self,
        name: &str,
        extra: &[(&str, String)],
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(format!("# config_hash = {}\n", self.config_hash).as_bytes());
        buf.extend_from_slice(format!("# master_seed = {}\n", self.master_seed).as_bytes());
        for (key, value) in extra {
            buf.extend_from_slice(format!("# {key} = {value}\n").as_bytes());
        }
        {
            let mut writer = csv::Writer::from_writer(&mut buf);
            writer.write_record(header).context("csv header")?;
            for row in rows {
                writer.write_record(row).context("csv row")?;
            }
            writer.flush().context("csv flush")?;
        }
        self.commit(name, buf)
    }

    /// Write a JSON document; the value should already carry the identity
    /// fields it needs.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut buf = serde_json::to_vec_pretty(value).context("serialize json output")?;
        buf.push(b'\n');
        self.commit(name, buf)
    }

    fn commit(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
        fs::write(&path, &bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.outputs.push(OutputRecord {
            path: name.to_string(),
            sha256: hex_digest(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Register files some other writer placed under the run directory, for
    /// example a snapshot dump. Walks the subtree in sorted order.
    pub fn note_tree(&mut self, name: &str) -> Result<()> {
        let base = self.root.join(name);
        let mut files = Vec::new();
        collect_files(&base, &mut files)?;
        files.sort();
        for file in files {
            let bytes = fs::read(&file)
                .with_context(|| format!("cannot read back {}", file.display()))?;
            let rel = file
                .strip_prefix(&self.root)
                .expect("walked file lies under the run directory")
                .to_string_lossy()
                .replace('\\', "/");
            self.outputs.push(OutputRecord {
                path: rel,
                sha256: hex_digest(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        Ok(())
    }

    /// Write the manifest and finish the run.
    pub fn finish(mut self, pass: bool) -> Result<()> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            experiment: self.experiment.clone(),
            config_hash: self.config_hash.clone(),
            master_seed: self.master_seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started_unix,
            finished_unix: unix_now(),
            pass,
            outputs: std::mem::take(&mut self.outputs),
        };
        let mut buf = serde_json::to_vec_pretty(&manifest).context("serialize manifest")?;
        buf.push(b'\n');
        let path = self.root.join(MANIFEST_NAME);
        fs::write(&path, &buf).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in
        fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))?
    {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Shortest-round-trip decimal text for a float; what all CSV columns use.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}
