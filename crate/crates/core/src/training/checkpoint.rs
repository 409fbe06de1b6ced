//! Checkpoint file layout:
//!
//! ```text
//! offset 0   8 bytes   magic "TXRF0001"
//! offset 8   u64 LE    header length H
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          f32 LE blobs, row-major, in header order
//! ```
//!
//! Blob order is the cache `A`, then every refiner parameter in
//! [`ParamId::ALL`] order, then the first and second optimizer moments in the
//! same order. All state is kept at `f32` precision between epochs, so the
//! 32-bit blobs reproduce it exactly.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::OptimizerState;
use super::trainer::TrainState;
use crate::cache::{CacheSnapshot, LocalCache};
use crate::dataio::{f32_bytes, f32_values, EmbeddingBundle};
use crate::error::{CheckpointError, Error, Result};
use crate::numkit::Matrix;
use crate::refiner::{AggregationHead, AlignmentMlp, ParamId, RefinerParams};

pub const MAGIC_PREFIX: &[u8; 4] = b"TXRF";
pub const VERSION_TAG: &[u8; 4] = b"0001";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDims {
    pub d: usize,
    pub hidden: usize,
    pub classes: usize,
    pub cache_entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub dims: CheckpointDims,
    pub epoch: u64,
    pub step: u64,
    pub steps_per_epoch: u64,
    pub rng: RngState,
    pub cache_gamma: f64,
    pub cache_write_count: Vec<u64>,
    pub cache_frozen: bool,
    pub blobs: Vec<BlobInfo>,
}

fn blob_names() -> Vec<String> {
    let mut names = vec!["A".to_string()];
    for prefix in ["", "adam_m.", "adam_v."] {
        names.extend(ParamId::ALL.iter().map(|id| format!("{prefix}{}", id.name())));
    }
    names
}

fn param_shape(id: ParamId, dims: &CheckpointDims) -> (usize, usize) {
    let CheckpointDims { d, hidden: h, classes: c, .. } = *dims;
    match id {
        ParamId::W1 => (h, d),
        ParamId::B1 | ParamId::LnGain | ParamId::LnBias => (1, h),
        ParamId::W2 => (d, h),
        ParamId::B2 | ParamId::BAgg => (1, d),
        ParamId::WAgg => (d, 2 * d),
        ParamId::ClassDelta => (c, d),
    }
}

fn expected_shapes(dims: &CheckpointDims) -> Vec<(usize, usize)> {
    let mut shapes = vec![(dims.cache_entries, dims.d)];
    for _ in 0..3 {
        shapes.extend(ParamId::ALL.iter().map(|&id| param_shape(id, dims)));
    }
    shapes
}

fn state_blobs(state: &TrainState) -> Vec<&Matrix> {
    let mut out = vec![state.cache.entries()];
    out.extend(ParamId::ALL.iter().map(|&id| state.params.get(id)));
    out.extend(state.optimizer.m.iter());
    out.extend(state.optimizer.v.iter());
    out
}

/// Serializes `state` to checkpoint bytes.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let blobs = state_blobs(state);
    let header = CheckpointHeader {
        config: state.config.clone(),
        dims: CheckpointDims {
            d: state.params.dim(),
            hidden: state.params.mlp.hidden(),
            classes: state.params.num_classes(),
            cache_entries: state.cache.num_entries(),
        },
        epoch: state.epoch,
        step: state.step,
        steps_per_epoch: state.steps_per_epoch,
        rng: RngState {
            seed: state.rng_seed.to_string(),
            stream: state.rng.get_stream().to_string(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        cache_gamma: state.cache.gamma(),
        cache_write_count: state.cache.write_count().to_vec(),
        cache_frozen: state.cache.is_frozen(),
        blobs: blob_names()
            .into_iter()
            .zip(&blobs)
            .map(|(name, m)| BlobInfo {
                name,
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + blobs.iter().map(|m| 4 * m.len()).sum::<usize>());
    out.extend_from_slice(MAGIC_PREFIX);
    out.extend_from_slice(VERSION_TAG);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in blobs {
        out.extend_from_slice(&f32_bytes(m));
    }
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_num<T: std::str::FromStr>(field: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| CheckpointError::Header(format!("rng {field} `{s}` is not a decimal integer")).into())
}

/// Parses only the JSON header.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated(format!("{} bytes, magic needs 8", bytes.len())).into());
    }
    if &bytes[..4] != MAGIC_PREFIX {
        return Err(CheckpointError::BadMagic(bytes[..8].to_vec()).into());
    }
    if &bytes[4..8] != VERSION_TAG {
        return Err(CheckpointError::Version {
            found: String::from_utf8_lossy(&bytes[4..8]).into_owned(),
            expected: String::from_utf8_lossy(VERSION_TAG).into_owned(),
        }
        .into());
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("missing header length".into()).into());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Truncated(format!("header of {hlen} bytes exceeds file")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, end))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let (h, mut offset) = decode_header(bytes)?;
    let names = blob_names();
    let shapes = expected_shapes(&h.dims);
    if h.blobs.len() != names.len() {
        return Err(CheckpointError::Header(format!(
            "{} blobs declared, expected {}",
            h.blobs.len(),
            names.len()
        ))
        .into());
    }
    let mut mats = Vec::with_capacity(names.len());
    for ((info, name), &(rows, cols)) in h.blobs.iter().zip(&names).zip(&shapes) {
        if &info.name != name {
            return Err(CheckpointError::Header(format!("blob `{}` where `{name}` expected", info.name)).into());
        }
        if (info.rows, info.cols) != (rows, cols) {
            return Err(CheckpointError::Shape {
                name: name.clone(),
                expected: format!("{rows}x{cols}"),
                actual: format!("{}x{}", info.rows, info.cols),
            }
            .into());
        }
        let len = rows * cols * 4;
        if offset + len > bytes.len() {
            return Err(CheckpointError::Truncated(format!(
                "blob `{name}` needs {len} bytes at offset {offset}, file has {}",
                bytes.len()
            ))
            .into());
        }
        mats.push(Matrix::from_vec(rows, cols, f32_values(&bytes[offset..offset + len]))?);
        offset += len;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Header(format!("{} trailing bytes", bytes.len() - offset)).into());
    }

    let mut it = mats.into_iter();
    let entries = it.next().expect("cache blob");
    let mut p: Vec<Matrix> = it.by_ref().take(ParamId::ALL.len()).collect();
    let m: Vec<Matrix> = it.by_ref().take(ParamId::ALL.len()).collect();
    let v: Vec<Matrix> = it.collect();
    let mut take = |id: ParamId| std::mem::replace(&mut p[id.index()], Matrix::zeros(0, 0));
    let params = RefinerParams {
        mlp: AlignmentMlp {
            w1: take(ParamId::W1),
            b1: take(ParamId::B1),
            ln_gain: take(ParamId::LnGain),
            ln_bias: take(ParamId::LnBias),
            w2: take(ParamId::W2),
            b2: take(ParamId::B2),
            activation: h.config.activation,
        },
        head: AggregationHead {
            w_agg: take(ParamId::WAgg),
            b_agg: take(ParamId::BAgg),
            alpha: h.config.alpha,
        },
        class_delta: take(ParamId::ClassDelta),
    };
    let cache = LocalCache::from_snapshot(CacheSnapshot {
        entries,
        gamma: h.cache_gamma,
        write_count: h.cache_write_count,
        frozen: h.cache_frozen,
    })?;
    let rng_seed: u64 = parse_num("seed", &h.rng.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(parse_num("stream", &h.rng.stream)?);
    rng.set_word_pos(parse_num("word_pos", &h.rng.word_pos)?);
    Ok(TrainState {
        config: h.config,
        params,
        cache,
        optimizer: OptimizerState { m, v },
        epoch: h.epoch,
        step: h.step,
        steps_per_epoch: h.steps_per_epoch,
        rng_seed,
        rng,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it fits `bundle`'s dimensions.
pub fn load_checkpoint_for(path: impl AsRef<Path>, bundle: &EmbeddingBundle) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    let checks = [
        ("embedding dim", bundle.dim(), state.params.dim()),
        ("base classes", bundle.manifest.n_classes_base, state.params.num_classes()),
    ];
    for (name, expected, actual) in checks {
        if expected != actual {
            return Err(CheckpointError::Shape {
                name: name.into(),
                expected: expected.to_string(),
                actual: actual.to_string(),
            }
            .into());
        }
    }
    if state.config.top_k > bundle.n_tokens() {
        return Err(Error::Config(format!(
            "checkpoint top-k {} exceeds bundle token count {}",
            state.config.top_k,
            bundle.n_tokens()
        )));
    }
    Ok(state)
}
