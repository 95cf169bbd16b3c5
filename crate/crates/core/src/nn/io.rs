//! Weight files: an 8-byte magic, a little-endian `u32` header length, a
//! JSON header, then every parameter as little-endian `f32`s in declaration
//! order. The header records the SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network};
use crate::error::{Error, Result};
use crate::util::{sha256_hex, write_bytes};

const MAGIC: &[u8; 8] = b"BOWELNN1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub param_shapes: Vec<Vec<usize>>,
    pub seed: u64,
    /// Hash of the spectrogram config the network was trained on.
    pub config_hash: String,
    /// Free-form model description stored alongside the weights.
    pub meta: serde_json::Value,
    pub payload_len: u64,
    pub payload_sha256: String,
}

pub fn encode_network(net: &Network, config_hash: &str, meta: serde_json::Value) -> Vec<u8> {
    let payload: Vec<u8> = net.params().flat_map(|p| p.value.iter().flat_map(|v| v.to_le_bytes())).collect();
    let header = WeightHeader {
        input_shape: net.input_shape().to_vec(),
        layers: net.specs(),
        param_shapes: net.params().map(|p| p.shape.clone()).collect(),
        seed: net.seed(),
        config_hash: config_hash.to_string(),
        meta,
        payload_len: payload.len() as u64,
        payload_sha256: sha256_hex(&payload),
    };
    let header = serde_json::to_vec(&header).expect("header always serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_network(bytes: &[u8]) -> Result<(Network, WeightHeader)> {
    let corrupt = |m: &str| Error::CorruptModel(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing weight-file magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let header: WeightHeader =
        serde_json::from_slice(&body[..header_len]).map_err(|e| Error::CorruptModel(format!("bad header: {e}")))?;
    let payload = &body[header_len..];
    if payload.len() as u64 != header.payload_len {
        return Err(Error::CorruptModel(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_len
        )));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(corrupt("payload hash does not match header"));
    }
    let mut net = Network::new(&header.input_shape, &header.layers, header.seed)
        .map_err(|e| Error::CorruptModel(format!("layer stack rejected: {e}")))?;
    let shapes: Vec<Vec<usize>> = net.params().map(|p| p.shape.clone()).collect();
    if shapes != header.param_shapes {
        return Err(corrupt("parameter shapes do not match the layer stack"));
    }
    let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let values = shapes
        .iter()
        .map(|s| floats.by_ref().take(s.iter().product()).collect())
        .collect();
    net.set_param_values(values)?;
    Ok((net, header))
}

pub fn save_network(path: &Path, net: &Network, config_hash: &str, meta: serde_json::Value) -> Result<()> {
    write_bytes(path, &encode_network(net, config_hash, meta))
}

pub fn load_network(path: &Path) -> Result<(Network, WeightHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_network(&bytes)
}
