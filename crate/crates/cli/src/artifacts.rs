//! Deterministic run artifacts: CSV data files and the JSON manifest.
//!
//! Data files are written through [`ArtifactWriter`], which checksums the
//! exact bytes emitted; the manifest records the resolved configuration,
//! timings and the file inventory, and is written atomically at the end of
//! the run. Floats are formatted with Rust's shortest round-trip notation,
//! so reruns with the same seed produce byte-identical files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub config: Value,
    pub seed: u64,
    pub wall_seconds: f64,
    pub degenerate_samples: Option<usize>,
    pub warnings: Vec<String>,
    pub files: Vec<FileEntry>,
}

pub struct ArtifactWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
    warnings: Vec<String>,
    started: Instant,
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            warnings: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    /// Writes a data file and records its checksum in the inventory.
    pub fn write_file(&mut self, name: &str, contents: &[u8]) -> std::io::Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        let mut hasher = Sha256::new();
        hasher.update(contents);
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: contents.len() as u64,
            sha256: hex::encode(hasher.finalize()),
        });
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[Vec<f64>]) -> std::io::Result<()> {
        let mut out = String::with_capacity(rows.len() * 32 + header.len() + 1);
        out.push_str(header);
        out.push('\n');
        for row in rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                push_float(&mut out, *v);
            }
            out.push('\n');
        }
        self.write_file(name, out.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(value).expect("serializable report");
        self.write_file(name, text.as_bytes())
    }

    /// Writes the manifest atomically (temp file + rename) and consumes the
    /// writer. The manifest itself is not part of its own inventory.
    pub fn finish(
        self,
        command: &str,
        config: Value,
        seed: u64,
        degenerate_samples: Option<usize>,
    ) -> std::io::Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            degenerate_samples,
            warnings: self.warnings,
            files: self.files,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        let final_path = self.dir.join("manifest.json");
        let tmp_path = self.dir.join("manifest.json.tmp");
        {
            let mut f = fs::File::create(&tmp_path)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(tmp_path, final_path)
    }
}

fn push_float(out: &mut String, v: f64) {
    // Shortest round-trip formatting; integers keep a trailing ".0" so the
    // column type never wobbles between runs.
    if v == v.trunc() && v.is_finite() && v.abs() < 1e15 {
        out.push_str(&format!("{v:.1}"));
    } else {
        out.push_str(&format!("{v}"));
    }
}

/// File label for an evaluation time: `1.0 -> "t1"`, `0.5 -> "t0p5"`.
pub fn time_label(t: f64) -> String {
    let s = format!("{t}");
    format!("t{}", s.replace('.', "p").replace('-', "m"))
}
