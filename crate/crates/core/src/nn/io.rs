//! Flat little-endian weight blobs: `FPW1`, tensor count (u32), then per
//! tensor a u64 length followed by that many f32 values.

use std::path::Path;

use super::layers::Layer;
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 4] = b"FPW1";

pub fn encode_state(net: &dyn Layer) -> Vec<u8> {
    let mut tensors: Vec<Vec<f32>> = Vec::new();
    net.visit_state(&mut |s| tensors.push(s.to_vec()));
    let total: usize = tensors.iter().map(|t| 8 + 4 * t.len()).sum();
    let mut buf = Vec::with_capacity(8 + total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_state(bytes: &[u8], net: &mut dyn Layer) -> Result<()> {
    let bad = |msg: &str| Error::Weights(msg.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing FPW1 header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut seen = 0;
    let mut err: Option<Error> = None;
    net.visit_state_mut(&mut |dst| {
        if err.is_some() {
            return;
        }
        if seen == count || pos + 8 > bytes.len() {
            err = Some(bad("blob holds fewer tensors than the network"));
            return;
        }
        let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if len != dst.len() {
            err = Some(Error::Weights(format!(
                "tensor {seen} has {len} values, network expects {}",
                dst.len()
            )));
            return;
        }
        if pos + 4 * len > bytes.len() {
            err = Some(bad("truncated blob"));
            return;
        }
        for (d, chunk) in dst.iter_mut().zip(bytes[pos..pos + 4 * len].chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        pos += 4 * len;
        seen += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != count || pos != bytes.len() {
        return Err(bad("blob holds more tensors than the network"));
    }
    Ok(())
}

pub fn save_state(net: &dyn Layer, path: &Path) -> Result<()> {
    std::fs::write(path, encode_state(net)).at(path)
}

pub fn load_state(net: &mut dyn Layer, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).at(path)?;
    decode_state(&bytes, net)
}
