//! On-disk bundle layout: `manifest.json` plus five little-endian blobs.
//!
//! | file                   | element | shape              |
//! |------------------------|---------|--------------------|
//! | `class_embeddings.bin` | f32     | `C × d`            |
//! | `labels.bin`           | u32     | `S_total`          |
//! | `globals.bin`          | f32     | `S_total × d`      |
//! | `tokens.bin`           | f32     | `S_total × N × d`  |
//! | `attn.bin`             | f32     | `S_total × N`      |

use std::fs;
use std::path::Path;

use super::bundle::{EmbeddingBundle, Manifest};
use crate::error::{BundleError, Error, Result};
use crate::numkit::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLASS_EMBEDDINGS_FILE: &str = "class_embeddings.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const GLOBALS_FILE: &str = "globals.bin";
pub const TOKENS_FILE: &str = "tokens.bin";
pub const ATTN_FILE: &str = "attn.bin";

pub fn f32_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn f32_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn save_bundle(bundle: &EmbeddingBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_vec_pretty(&bundle.manifest)
        .map_err(|e| BundleError::Manifest(e.to_string()))?;
    write(dir, MANIFEST_FILE, &manifest)?;
    write(dir, CLASS_EMBEDDINGS_FILE, &f32_bytes(&bundle.class_embeddings))?;
    let labels: Vec<u8> = bundle.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write(dir, LABELS_FILE, &labels)?;
    write(dir, GLOBALS_FILE, &f32_bytes(&bundle.globals))?;
    write(dir, TOKENS_FILE, &f32_bytes(&bundle.tokens))?;
    write(dir, ATTN_FILE, &f32_bytes(&bundle.attention))?;
    Ok(())
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::io(p, e))
}

fn read_blob(dir: &Path, name: &str, expected: u64) -> Result<Vec<u8>> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(BundleError::MissingBlob(p).into());
    }
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if bytes.len() as u64 != expected {
        return Err(BundleError::SizeMismatch {
            file: name.to_string(),
            expected,
            actual: bytes.len() as u64,
        }
        .into());
    }
    Ok(bytes)
}

fn read_matrix(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = read_blob(dir, name, (rows * cols * 4) as u64)?;
    Matrix::from_vec(rows, cols, f32_values(&bytes))
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(BundleError::MissingBlob(mpath).into());
    }
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| BundleError::Manifest(e.to_string()))?;
    let (c, d, n) = (manifest.n_classes(), manifest.d, manifest.n_tokens);
    let s = manifest.n_samples();

    let class_embeddings = read_matrix(dir, CLASS_EMBEDDINGS_FILE, c, d)?;
    let label_bytes = read_blob(dir, LABELS_FILE, (s * 4) as u64)?;
    let labels = label_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let globals = read_matrix(dir, GLOBALS_FILE, s, d)?;
    let tokens = read_matrix(dir, TOKENS_FILE, s * n, d)?;
    let attention = read_matrix(dir, ATTN_FILE, s, n)?;

    let bundle = EmbeddingBundle {
        manifest,
        class_embeddings,
        labels,
        globals,
        tokens,
        attention,
    };
    bundle.validate()?;
    Ok(bundle)
}
