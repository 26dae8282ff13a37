//! Run manifests: config hash, seed, version and a hash of every output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub package: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub workers: usize,
    pub status: String,
    pub files: Vec<FileEntry>,
}

/// Collects output files in a directory and writes the manifest last.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Render with `f` into memory, write `name` and record its hash.
    pub fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        fs::write(self.dir.join(name), &buf)?;
        self.files.retain(|e| e.name != name);
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(&buf)),
            bytes: buf.len() as u64,
        });
        Ok(())
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn finish(
        self,
        subcommand: &str,
        config_sha256: String,
        seed: Option<u64>,
        workers: usize,
        status: &str,
    ) -> Result<Manifest, CliError> {
        let m = Manifest {
            subcommand: subcommand.to_string(),
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256,
            seed,
            workers,
            status: status.to_string(),
            files: self.files,
        };
        let text = toml::to_string(&m).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(m)
    }
}
