//! On-disk formats for embedding matrices and checkpoints.
//!
//! Embedding file: a 24-byte little-endian header
//!
//! ```text
//! 0..4    magic "VEMB"
//! 4..6    format version (u16, currently 1)
//! 6..8    dtype tag (u16, 1 = float32)
//! 8..16   rows (u64)
//! 16..24  width (u64)
//! ```
//!
//! followed by `rows * width` float32 values in row-major order.
//!
//! A checkpoint is a directory holding `manifest.json`, `tensors.bin` and
//! `vocab.txt`. The manifest lists every tensor with its shape and byte
//! range in the blob, plus SHA-256 digests of the blob and vocabulary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bpe::{BpeError, Vocabulary};
use crate::toy_mlm::{ModelCheckpoint, ModelError, Params, TransformerConfig};
use crate::vocab_transfer::{EmbeddingMatrix, TransferError};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"VEMB";
pub const EMBEDDING_VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;
pub const HEADER_LEN: usize = 24;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FORMAT: &str = "vtp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("dtype mismatch: tag {0}, only 1 (float32) is supported")]
    DtypeMismatch(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("{extra} trailing bytes after payload")]
    TrailingData { extra: u64 },
    #[error("missing manifest")]
    MissingManifest,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("dangling vocab reference {0}")]
    DanglingVocab(String),
    #[error("digest mismatch for {0}")]
    DigestMismatch(String),
    #[error("invalid embedding matrix: {0}")]
    InvalidMatrix(#[from] TransferError),
    #[error("invalid vocabulary: {0}")]
    Vocab(#[from] BpeError),
    #[error("invalid checkpoint: {0}")]
    Model(#[from] ModelError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IoError {
    /// Stable machine-readable code for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            IoError::BadMagic => "bad_magic",
            IoError::UnsupportedVersion(_) => "unsupported_version",
            IoError::DtypeMismatch(_) => "dtype_mismatch",
            IoError::Truncated { .. } => "truncated_payload",
            IoError::TrailingData { .. } => "trailing_data",
            IoError::MissingManifest => "missing_manifest",
            IoError::InvalidManifest(_) => "invalid_manifest",
            IoError::MissingTensor(_) => "missing_tensor",
            IoError::UnexpectedTensor(_) => "unexpected_tensor",
            IoError::ShapeMismatch { .. } => "shape_mismatch",
            IoError::DanglingVocab(_) => "dangling_vocab",
            IoError::DigestMismatch(_) => "digest_mismatch",
            IoError::InvalidMatrix(_) => "invalid_matrix",
            IoError::Vocab(_) => "invalid_vocab",
            IoError::Model(_) => "invalid_checkpoint",
            IoError::Io { .. } => "io",
        }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
        move |source| IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Vec<u8> {
    let values = m.as_array();
    let mut out = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.width() as u64).to_le_bytes());
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix, IoError> {
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(IoError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(IoError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let version = u16_at(4);
    if version != EMBEDDING_VERSION {
        return Err(IoError::UnsupportedVersion(version as u32));
    }
    let dtype = u16_at(6);
    if dtype != DTYPE_F32 {
        return Err(IoError::DtypeMismatch(dtype));
    }
    let (rows, width) = (u64_at(8), u64_at(16));
    let expected = rows
        .checked_mul(width)
        .and_then(|n| n.checked_mul(4))
        .ok_or(IoError::Truncated {
            expected: u64::MAX,
            found: (bytes.len() - HEADER_LEN) as u64,
        })?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(IoError::Truncated { expected, found });
    }
    if found > expected {
        return Err(IoError::TrailingData { extra: found - expected });
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let array = Array2::from_shape_vec((rows as usize, width as usize), values)
        .map_err(|e| IoError::InvalidManifest(e.to_string()))?;
    Ok(EmbeddingMatrix::new(array)?)
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<(), IoError> {
    write_atomic(path, &encode_embeddings(m)).map_err(IoError::io(path))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix, IoError> {
    let bytes = fs::read(path).map_err(IoError::io(path))?;
    decode_embeddings(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub format_version: u32,
    pub config: TransformerConfig,
    pub vocab: FileRef,
    pub blob: FileRef,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `ckpt` into directory `dir`, creating it if needed. The manifest
/// is written last, so a directory with a manifest is complete.
pub fn write_checkpoint(dir: &Path, ckpt: &ModelCheckpoint) -> Result<CheckpointManifest, IoError> {
    fs::create_dir_all(dir).map_err(IoError::io(dir))?;
    let vocab_text = ckpt.vocab.to_text();
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for t in ckpt.params.tensors() {
        let offset = blob.len() as u64;
        for v in t.tensor.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.tensor.shape().to_vec(),
            offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        format_version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        vocab: FileRef {
            file: VOCAB_FILE.to_string(),
            sha256: sha256_hex(vocab_text.as_bytes()),
        },
        blob: FileRef {
            file: TENSORS_FILE.to_string(),
            sha256: sha256_hex(&blob),
        },
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest") + "\n";
    for (name, bytes) in [(VOCAB_FILE, vocab_text.as_bytes()), (TENSORS_FILE, &blob[..]), (MANIFEST_FILE, json.as_bytes())] {
        let path = dir.join(name);
        write_atomic(&path, bytes).map_err(IoError::io(&path))?;
    }
    Ok(manifest)
}

fn referenced_file(dir: &Path, r: &FileRef) -> Result<PathBuf, IoError> {
    let rel = Path::new(&r.file);
    if r.file.is_empty() || rel.is_absolute() || rel.components().count() != 1 {
        return Err(IoError::InvalidManifest(format!("file reference {:?} must be a plain file name", r.file)));
    }
    Ok(dir.join(rel))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, IoError> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(IoError::MissingManifest),
        Err(e) => return Err(IoError::io(&path)(e)),
    };
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| IoError::InvalidManifest(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(IoError::InvalidManifest(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(IoError::UnsupportedVersion(manifest.format_version));
    }
    Ok(manifest)
}

/// Reads a checkpoint directory, validating every tensor against the
/// config. Nothing is returned unless the whole checkpoint is consistent.
pub fn read_checkpoint(dir: &Path) -> Result<ModelCheckpoint, IoError> {
    let manifest = read_manifest(dir)?;

    let vocab_path = referenced_file(dir, &manifest.vocab)?;
    let vocab_text = match fs::read_to_string(&vocab_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(IoError::DanglingVocab(manifest.vocab.file.clone()))
        }
        Err(e) => return Err(IoError::io(&vocab_path)(e)),
    };
    if sha256_hex(vocab_text.as_bytes()) != manifest.vocab.sha256 {
        return Err(IoError::DigestMismatch(manifest.vocab.file.clone()));
    }
    let vocab = Vocabulary::parse(&vocab_text)?;

    let blob_path = referenced_file(dir, &manifest.blob)?;
    let blob = fs::read(&blob_path).map_err(IoError::io(&blob_path))?;
    if sha256_hex(&blob) != manifest.blob.sha256 {
        return Err(IoError::DigestMismatch(manifest.blob.file.clone()));
    }

    manifest.config.validate()?;
    let mut params = Params::<f32>::zeros(&manifest.config, manifest.config.enable_nsp);
    let mut expected_offset = 0u64;
    let mut entries = manifest.tensors.iter();
    for slot in params.tensors_mut() {
        let entry = entries.next().ok_or_else(|| IoError::MissingTensor(slot.name.clone()))?;
        if entry.name != slot.name {
            return Err(if manifest.tensors.iter().any(|e| e.name == slot.name) {
                IoError::InvalidManifest(format!("tensor {} out of order", entry.name))
            } else {
                IoError::MissingTensor(slot.name.clone())
            });
        }
        if entry.shape != slot.tensor.shape() {
            return Err(IoError::ShapeMismatch {
                name: entry.name.clone(),
                expected: slot.tensor.shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
        let len = slot.tensor.len() as u64 * 4;
        if entry.offset != expected_offset || entry.byte_length != len {
            return Err(IoError::InvalidManifest(format!("bad byte range for {}", entry.name)));
        }
        let end = entry.offset + len;
        if end > blob.len() as u64 {
            return Err(IoError::Truncated {
                expected: end,
                found: blob.len() as u64,
            });
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        let mut tensor = slot.tensor;
        for (dst, c) in tensor.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
        expected_offset = end;
    }
    if let Some(extra) = entries.next() {
        return Err(IoError::UnexpectedTensor(extra.name.clone()));
    }
    if expected_offset != blob.len() as u64 {
        return Err(IoError::TrailingData {
            extra: blob.len() as u64 - expected_offset,
        });
    }
    Ok(ModelCheckpoint::new(manifest.config, vocab, params)?)
}
