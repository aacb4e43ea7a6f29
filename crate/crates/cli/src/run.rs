//! Per-run output directories: a reproducibility header on creation and a
//! manifest of produced files on completion.

use std::fs;
use std::path::{Path, PathBuf};

use czsl_core::error::{Error, Result};
use czsl_core::training::CHECKPOINT_SCHEMA;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Version of `run.json` and `manifest.json`.
pub const RUN_SCHEMA: u32 = 1;

#[derive(Serialize)]
struct SchemaVersions {
    run: u32,
    checkpoint: u32,
}

#[derive(Serialize)]
struct Header<'a> {
    command: &'a str,
    version: &'a str,
    args: &'a [String],
    seed: u64,
    config: &'a serde_json::Value,
    schema_versions: SchemaVersions,
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

pub struct RunDir {
    pub path: PathBuf,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunDir {
    /// Creates `<root>/<command>-<timestamp>`, suffixed when taken.
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{command}-{stamp}");
        let mut path = root.join(&base);
        let mut k = 2;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = root.join(format!("{base}-{k}"));
                    k += 1;
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Ok(RunDir { path })
    }

    /// Writes `run.json`. Holds no timestamps, so equal invocations give
    /// equal headers.
    pub fn write_header(
        &self,
        command: &str,
        args: &[String],
        seed: u64,
        config: &serde_json::Value,
    ) -> Result<()> {
        let h = Header {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args,
            seed,
            config,
            schema_versions: SchemaVersions {
                run: RUN_SCHEMA,
                checkpoint: CHECKPOINT_SCHEMA,
            },
        };
        self.write("run.json", &serde_json::to_string_pretty(&h)?)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    /// Lists every file under the run directory in `manifest.json`.
    pub fn finish(&self) -> Result<()> {
        let mut files = Vec::new();
        collect(&self.path, &self.path, &mut files)?;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        files.retain(|f| f.path != "manifest.json");
        self.write("manifest.json", &serde_json::to_string_pretty(&files)?)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            out.push(FileEntry {
                path: p
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
    }
    Ok(())
}
