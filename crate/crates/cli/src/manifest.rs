//! Provenance record written next to every output.

use std::path::{Path, PathBuf};

use serde::Serialize;
use vtp_core::model_io::{
    read_checkpoint, read_manifest, sha256_hex, write_atomic, write_checkpoint, IoError, MANIFEST_FILE, TENSORS_FILE,
    VOCAB_FILE,
};
use vtp_core::toy_mlm::ModelCheckpoint;

use crate::error::CliError;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// No timestamps: identical inputs and flags give an identical manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub flags: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(subcommand: &str, flags: serde_json::Value) -> Self {
        Self {
            tool: "vtp",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            flags,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Reads an input file and records its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    /// Reads and validates a checkpoint, recording the files it consists of.
    pub fn read_checkpoint(&mut self, dir: &Path) -> Result<ModelCheckpoint, CliError> {
        let missing = |e: IoError| match e {
            IoError::MissingManifest => CliError::Io {
                path: dir.join(MANIFEST_FILE),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing manifest"),
            },
            other => other.into(),
        };
        let ckpt = read_checkpoint(dir).map_err(missing)?;
        let manifest = read_manifest(dir).map_err(missing)?;
        for name in [MANIFEST_FILE, &manifest.vocab.file, &manifest.blob.file] {
            self.read_input(&dir.join(name))?;
        }
        Ok(ckpt)
    }

    /// Writes `bytes` atomically and records the output.
    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes).map_err(CliError::io(path))?;
        self.record_output(path, bytes);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path, bytes: &[u8]) {
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Writes a checkpoint directory and records its files.
    pub fn write_checkpoint(&mut self, dir: &Path, ckpt: &ModelCheckpoint) -> Result<(), CliError> {
        write_checkpoint(dir, ckpt)?;
        for name in [VOCAB_FILE, TENSORS_FILE, MANIFEST_FILE] {
            let path = dir.join(name);
            let bytes = std::fs::read(&path).map_err(CliError::io(&path))?;
            self.record_output(&path, &bytes);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("serializable manifest") + "\n";
        write_atomic(path, json.as_bytes()).map_err(CliError::io(path))
    }
}

/// Manifest path for a single-file output: `<out>.manifest.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
