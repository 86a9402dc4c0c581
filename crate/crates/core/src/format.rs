//! On-disk model and tensor files.
//!
//! A model file is:
//!
//! ```text
//! "EBGRAPH1"                8-byte magic
//! u32 LE                    manifest length M
//! M bytes                   JSON manifest (nodes, attributes, shapes, labels,
//!                           per-tensor blob offsets, blob length and CRC32)
//! blob                      little-endian tensor data, tensors back to back
//! ```
//!
//! Tensor files (`.tensor`) use the same layout with magic `"EBTENSR1"` and a
//! JSON header describing one tensor.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{validate, Diagnostic, Graph, Metadata, Node, NodeId};
use crate::tensor::{DType, QuantParams, Tensor, TensorError};

pub const MODEL_MAGIC: &[u8; 8] = b"EBGRAPH1";
pub const TENSOR_MAGIC: &[u8; 8] = b"EBTENSR1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("weight blob checksum mismatch (manifest {expected:#010x}, blob {actual:#010x}, {len} bytes)")]
    ChecksumMismatch { expected: u32, actual: u32, len: usize },
    #[error("refusing to save an invalid graph: {0:?}")]
    Invalid(Vec<Diagnostic>),
}

impl From<TensorError> for FormatError {
    fn from(e: TensorError) -> Self {
        FormatError::CorruptManifest(e.to_string())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    metadata: Metadata,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    nodes: Vec<Node>,
    tensors: Vec<TensorEntry>,
    blob: BlobInfo,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    node: NodeId,
    #[serde(flatten)]
    header: TensorHeader,
    offset: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    dtype: DType,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobInfo {
    length: usize,
    crc32: u32,
}

fn frame(magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

fn unframe<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8]), FormatError> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(FormatError::CorruptManifest("bad magic".into()));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| FormatError::CorruptManifest("manifest length exceeds file".into()))?;
    Ok((&bytes[12..end], &bytes[end..]))
}

/// Serialize a graph to the model file layout.
pub fn encode(graph: &Graph) -> Result<Vec<u8>, FormatError> {
    let diags = validate(graph);
    if !diags.is_empty() {
        return Err(FormatError::Invalid(diags));
    }
    let mut blob = Vec::with_capacity(graph.weight_bytes());
    let mut tensors = Vec::with_capacity(graph.weights().len());
    for (&node, t) in graph.weights() {
        let bytes = t.to_le_bytes();
        tensors.push(TensorEntry {
            node,
            header: TensorHeader {
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                quant: t.quant(),
            },
            offset: blob.len(),
            length: bytes.len(),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        metadata: graph.metadata().clone(),
        inputs: graph.inputs().to_vec(),
        outputs: graph.outputs().to_vec(),
        nodes: graph.nodes().to_vec(),
        tensors,
        blob: BlobInfo {
            length: blob.len(),
            crc32: crc32fast::hash(&blob),
        },
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| FormatError::CorruptManifest(e.to_string()))?;
    Ok(frame(MODEL_MAGIC, &json, &blob))
}

pub fn decode(bytes: &[u8]) -> Result<Graph, FormatError> {
    let (json, blob) = unframe(MODEL_MAGIC, bytes)?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| FormatError::CorruptManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(FormatError::CorruptManifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let actual = crc32fast::hash(blob);
    if blob.len() != manifest.blob.length || actual != manifest.blob.crc32 {
        return Err(FormatError::ChecksumMismatch {
            expected: manifest.blob.crc32,
            actual,
            len: blob.len(),
        });
    }
    let mut weights = std::collections::BTreeMap::new();
    for e in manifest.tensors {
        let bytes = e
            .offset
            .checked_add(e.length)
            .and_then(|end| blob.get(e.offset..end))
            .ok_or_else(|| FormatError::CorruptManifest(format!("tensor for node {} out of range", e.node)))?;
        let t = Tensor::from_le_bytes(e.header.shape, e.header.dtype, bytes, e.header.quant)?;
        weights.insert(e.node, t);
    }
    Ok(Graph::from_parts(
        manifest.nodes,
        weights,
        manifest.inputs,
        manifest.outputs,
        manifest.metadata,
    ))
}

pub fn save(graph: &Graph, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, encode(graph)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Graph, FormatError> {
    decode(&fs::read(path)?)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let header = TensorHeader {
        dtype: t.dtype(),
        shape: t.shape().to_vec(),
        quant: t.quant(),
    };
    let json = serde_json::to_vec(&header).expect("tensor header serializes");
    frame(TENSOR_MAGIC, &json, &t.to_le_bytes())
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let (json, data) = unframe(TENSOR_MAGIC, bytes)?;
    let h: TensorHeader =
        serde_json::from_slice(json).map_err(|e| FormatError::CorruptManifest(e.to_string()))?;
    Ok(Tensor::from_le_bytes(h.shape, h.dtype, data, h.quant)?)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    decode_tensor(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvAttrs, GraphBuilder, Op, Padding};

    fn three_nodes() -> Graph {
        let mut b = GraphBuilder::new("tiny");
        let x = b.input("x", &[1, 2, 2, 1]);
        let w = Tensor::from_f32(vec![1, 1, 1, 2], vec![0.1, -3.5]).unwrap();
        let y = b.conv2d("c", x, w, None, ConvAttrs::new(1, 1, Padding::Same));
        b.output(y);
        b.finish()
    }

    #[test]
    fn round_trip_is_identical() {
        let g = three_nodes();
        let back = decode(&encode(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        assert_eq!(encode(&back).unwrap(), encode(&g).unwrap());
    }

    #[test]
    fn truncated_blob_fails_checksum() {
        let mut bytes = encode(&three_nodes()).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(FormatError::ChecksumMismatch { .. })));
    }

    #[test]
    fn flipped_blob_bit_fails_checksum() {
        let mut bytes = encode(&three_nodes()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(decode(&bytes), Err(FormatError::ChecksumMismatch { .. })));
    }

    #[test]
    fn garbage_manifest_is_corrupt() {
        let bytes = frame(MODEL_MAGIC, b"{not json", &[]);
        assert!(matches!(decode(&bytes), Err(FormatError::CorruptManifest(_))));
        assert!(matches!(decode(b"nope"), Err(FormatError::CorruptManifest(_))));
    }

    #[test]
    fn invalid_graph_is_not_saved() {
        let mut b = GraphBuilder::new("bad");
        let x = b.input("x", &[1, 4]);
        let y = b.op("r", Op::ReLU, &[x]);
        let z = b.op("s", Op::ReLU, &[x]);
        b.output(y).output(z);
        assert!(matches!(encode(&b.finish()), Err(FormatError::Invalid(_))));
    }

    #[test]
    fn tensor_file_round_trip() {
        let q = QuantParams::new(0.25, -3).unwrap();
        let t = Tensor::from_i8(vec![3], vec![-128, 0, 127], q).unwrap();
        assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
    }
}
