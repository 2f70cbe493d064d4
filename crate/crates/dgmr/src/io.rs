//! Bit-exact serialization of models, datasets, and embeddings.
//!
//! One container format for all three kinds:
//!
//! ```text
//! bytes 0..4    magic "DGMR"
//! bytes 4..8    version, u32 little-endian (currently 1)
//! bytes 8..16   header length, u64 little-endian
//! bytes 16..    UTF-8 JSON header: {kind, config, tensors: [..]}
//! then          zero padding to the next 64-byte file offset
//! then          payload: little-endian tensor data
//! ```
//!
//! Tensor index entries carry `{name, dtype, shape, byte_offset, byte_len}`
//! with offsets relative to the payload start and 64-byte aligned; the
//! writer sorts the index by name, so identical objects produce identical
//! bytes. Model weights are stored as `f64`; dataset pixels may be narrowed
//! to `f32` (the synthetic generator emits `f32`-exact values, so nothing
//! is lost). The reader validates magic, version, bounds, alignment,
//! overlaps, shape/byte-length consistency, and rejects non-finite
//! payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::Dataset;
use crate::error::{Error, Result};
use crate::eval::EmbeddingSet;
use crate::linalg::DenseMatrix;
use crate::model::{Model, ModelConfig, IN_CHANS};

pub const MAGIC: [u8; 4] = *b"DGMR";
pub const VERSION: u32 = 1;
/// Payload and per-tensor alignment, in bytes.
pub const ALIGN: usize = 64;

/// What a container holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Model,
    Dataset,
    Embeddings,
}

impl ContainerKind {
    pub fn name(self) -> &'static str {
        match self {
            ContainerKind::Model => "model",
            ContainerKind::Dataset => "dataset",
            ContainerKind::Embeddings => "embeddings",
        }
    }
}

impl std::fmt::Display for ContainerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Payload element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ContainerKind,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Dataset metadata; pixel data lives in the payload, labels ride in the
/// header (they are small integers, not tensors).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    n: usize,
    image_size: usize,
    num_classes: Option<usize>,
    label_head_seed: Option<u64>,
    labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingsMeta {
    n: usize,
    dim: usize,
    labels: Option<Vec<usize>>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One tensor headed for the payload: already little-endian bytes.
struct RawTensor {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl RawTensor {
    fn f64(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::F64,
            shape,
            bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn f32(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::F32,
            shape,
            bytes: data
                .iter()
                .flat_map(|v| (*v as f32).to_le_bytes())
                .collect(),
        }
    }
}

/// Sorts tensors by name, lays out the aligned payload, and assembles the
/// full file image.
fn encode_container(
    kind: ContainerKind,
    config: serde_json::Value,
    mut tensors: Vec<RawTensor>,
) -> Result<Vec<u8>> {
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    if tensors.windows(2).any(|w| w[0].name == w[1].name) {
        return Err(Error::Format("duplicate tensor name".into()));
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for t in &tensors {
        offset = align_up(offset);
        let elems: usize = t.shape.iter().product();
        debug_assert_eq!(elems * t.dtype.size(), t.bytes.len());
        entries.push(TensorEntry {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            byte_offset: offset as u64,
            byte_len: t.bytes.len() as u64,
        });
        offset += t.bytes.len();
    }
    let header = Header {
        kind,
        config,
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let payload_start = align_up(16 + header_json.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.resize(payload_start, 0);
    for (t, e) in tensors.iter().zip(&header.tensors) {
        out.resize(payload_start + e.byte_offset as usize, 0);
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}

/// Parses and validates everything up to (but not including) payload
/// decoding: magic, version, header JSON, and the tensor index geometry.
fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "file too short for a container header: {} bytes",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Format(format!(
            "header length {header_len} extends past end of file"
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let payload_start = align_up(16 + header_len);
    let payload_len = bytes.len().saturating_sub(payload_start);

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.byte_offset % ALIGN as u64 != 0 {
            return Err(Error::Tensor {
                name: e.name.clone(),
                reason: format!("offset {} is not {ALIGN}-byte aligned", e.byte_offset),
            });
        }
        let elems: u64 = e.shape.iter().map(|&s| s as u64).product();
        if elems * e.dtype.size() as u64 != e.byte_len {
            return Err(Error::Tensor {
                name: e.name.clone(),
                reason: format!(
                    "shape {:?} x {} bytes/element does not match byte length {}",
                    e.shape,
                    e.dtype.size(),
                    e.byte_len
                ),
            });
        }
        if e.byte_offset + e.byte_len > payload_len as u64 {
            return Err(Error::Tensor {
                name: e.name.clone(),
                reason: "data extends past end of file (truncated?)".into(),
            });
        }
        spans.push((e.byte_offset, e.byte_len, &e.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[0].0 + w[0].1 > w[1].0 {
            return Err(Error::Tensor {
                name: w[1].2.to_string(),
                reason: format!("overlaps tensor '{}'", w[0].2),
            });
        }
    }
    Ok((header, payload_start))
}

/// Decodes one tensor's payload to `f64`, rejecting non-finite values.
fn decode_tensor(entry: &TensorEntry, bytes: &[u8], payload_start: usize) -> Result<Vec<f64>> {
    let start = payload_start + entry.byte_offset as usize;
    let data = &bytes[start..start + entry.byte_len as usize];
    let out: Vec<f64> = match entry.dtype {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Tensor {
            name: entry.name.clone(),
            reason: "payload contains non-finite values".into(),
        });
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn expect_kind(header: &Header, want: ContainerKind) -> Result<()> {
    if header.kind != want {
        return Err(Error::Format(format!(
            "expected a {want} container, found {}",
            header.kind
        )));
    }
    Ok(())
}

/// Reads just the container kind, without touching the payload.
pub fn peek_kind(path: impl AsRef<Path>) -> Result<ContainerKind> {
    let bytes = read_bytes(path.as_ref())?;
    Ok(decode_header(&bytes)?.0.kind)
}

/// Serializes a model; weights are always stored as `f64` so training and
/// gradient checks survive a round trip bit-exactly.
pub fn write_model(path: impl AsRef<Path>, model: &Model<f64>) -> Result<()> {
    model.validate()?;
    if !model.is_finite() {
        return Err(Error::NonFinite("model weights".into()));
    }
    let tensors = model
        .param_tensors()
        .into_iter()
        .map(|t| RawTensor::f64(t.name, t.shape, t.data))
        .collect();
    let bytes = encode_container(
        ContainerKind::Model,
        serde_json::to_value(&model.config)?,
        tensors,
    )?;
    write_file(path.as_ref(), &bytes)
}

/// Reads a model container, validating the tensor set against the header
/// config: every expected tensor present with the declared shape and dtype
/// `f64`, no extras, and a total element count matching the config's
/// parameter count.
pub fn read_model(path: impl AsRef<Path>) -> Result<Model<f64>> {
    let bytes = read_bytes(path.as_ref())?;
    let (header, payload_start) = decode_header(&bytes)?;
    expect_kind(&header, ContainerKind::Model)?;
    let config: ModelConfig = serde_json::from_value(header.config.clone())?;
    config.validate()?;

    let total: u64 = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().map(|&s| s as u64).product::<u64>())
        .sum();
    if total != config.param_count(None) {
        return Err(Error::Format(format!(
            "index holds {total} elements, config expects {}",
            config.param_count(None)
        )));
    }

    let mut model: Model<f64> = Model::zeros(&config);
    let mut used = vec![false; header.tensors.len()];
    for dst in model.param_tensors_mut() {
        let idx = header
            .tensors
            .iter()
            .position(|e| e.name == dst.name)
            .ok_or_else(|| Error::Tensor {
                name: dst.name.clone(),
                reason: "missing from the container".into(),
            })?;
        let entry = &header.tensors[idx];
        used[idx] = true;
        if entry.dtype != Dtype::F64 {
            return Err(Error::Tensor {
                name: entry.name.clone(),
                reason: "model weights must be stored as f64".into(),
            });
        }
        let expected: u64 = entry.shape.iter().map(|&s| s as u64).product();
        if expected as usize != dst.data.len() {
            return Err(Error::Tensor {
                name: entry.name.clone(),
                reason: format!(
                    "shape {:?} does not match the architecture's {} elements",
                    entry.shape,
                    dst.data.len()
                ),
            });
        }
        let values = decode_tensor(entry, &bytes, payload_start)?;
        dst.data.copy_from_slice(&values);
    }
    if let Some(idx) = used.iter().position(|&u| !u) {
        return Err(Error::Tensor {
            name: header.tensors[idx].name.clone(),
            reason: "not a tensor of this architecture".into(),
        });
    }
    model.validate()?;
    Ok(model)
}

/// Serializes a dataset; pick [`Dtype::F32`] to halve the payload when the
/// pixel values are `f32`-exact (the synthetic generator's always are).
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset<f64>, dtype: Dtype) -> Result<()> {
    dataset.validate()?;
    let meta = DatasetMeta {
        n: dataset.n,
        image_size: dataset.image_size,
        num_classes: dataset.num_classes,
        label_head_seed: dataset.label_head_seed,
        labels: dataset.labels.clone(),
    };
    let shape = vec![dataset.n, IN_CHANS, dataset.image_size, dataset.image_size];
    let tensor = match dtype {
        Dtype::F32 => RawTensor::f32("images", shape, &dataset.images),
        Dtype::F64 => RawTensor::f64("images", shape, &dataset.images),
    };
    let bytes = encode_container(
        ContainerKind::Dataset,
        serde_json::to_value(&meta)?,
        vec![tensor],
    )?;
    write_file(path.as_ref(), &bytes)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset<f64>> {
    let bytes = read_bytes(path.as_ref())?;
    let (header, payload_start) = decode_header(&bytes)?;
    expect_kind(&header, ContainerKind::Dataset)?;
    let meta: DatasetMeta = serde_json::from_value(header.config.clone())?;
    let entry = match header.tensors.as_slice() {
        [e] if e.name == "images" => e,
        _ => {
            return Err(Error::Format(
                "dataset container must hold exactly one tensor named 'images'".into(),
            ))
        }
    };
    let want = vec![meta.n, IN_CHANS, meta.image_size, meta.image_size];
    if entry.shape != want {
        return Err(Error::Tensor {
            name: entry.name.clone(),
            reason: format!("shape {:?} does not match metadata {want:?}", entry.shape),
        });
    }
    let dataset = Dataset {
        images: decode_tensor(entry, &bytes, payload_start)?,
        n: meta.n,
        image_size: meta.image_size,
        labels: meta.labels,
        num_classes: meta.num_classes,
        label_head_seed: meta.label_head_seed,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet<f64>) -> Result<()> {
    set.validate()?;
    let meta = EmbeddingsMeta {
        n: set.vectors.rows(),
        dim: set.vectors.cols(),
        labels: set.labels.clone(),
    };
    let tensor = RawTensor::f64(
        "vectors",
        vec![set.vectors.rows(), set.vectors.cols()],
        set.vectors.data(),
    );
    let bytes = encode_container(
        ContainerKind::Embeddings,
        serde_json::to_value(&meta)?,
        vec![tensor],
    )?;
    write_file(path.as_ref(), &bytes)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet<f64>> {
    let bytes = read_bytes(path.as_ref())?;
    let (header, payload_start) = decode_header(&bytes)?;
    expect_kind(&header, ContainerKind::Embeddings)?;
    let meta: EmbeddingsMeta = serde_json::from_value(header.config.clone())?;
    let entry = match header.tensors.as_slice() {
        [e] if e.name == "vectors" => e,
        _ => {
            return Err(Error::Format(
                "embeddings container must hold exactly one tensor named 'vectors'".into(),
            ))
        }
    };
    if entry.shape != [meta.n, meta.dim] {
        return Err(Error::Tensor {
            name: entry.name.clone(),
            reason: format!(
                "shape {:?} does not match metadata [{}, {}]",
                entry.shape, meta.n, meta.dim
            ),
        });
    }
    let values = decode_tensor(entry, &bytes, payload_start)?;
    let set = EmbeddingSet {
        vectors: DenseMatrix::from_vec(meta.n, meta.dim, values)?,
        labels: meta.labels,
    };
    set.validate()?;
    Ok(set)
}
