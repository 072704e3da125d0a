//! Checkpoint files: a magic line carrying the header length, a JSON
//! header (format version, network config, tensor index), then the
//! parameters as little-endian f32 in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DCaps, DCapsConfig};
use crate::numerics::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "DCAPS-CHECKPOINT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: DCapsConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Real>(net: &DCaps<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for p in net.params().iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
        });
        for &v in p.value.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: net.config().clone(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    let mut out = format!("{MAGIC} {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<DCaps<T>> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let first = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header line is not UTF-8".into()))?;
    let len: usize = first
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| bad(format!("not a checkpoint (first line {first:?})")))?;
    let start = nl + 1;
    let body = bytes
        .get(start..start + len)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let blob = &bytes[start + len..];

    let mut net = DCaps::<T>::build(header.config.clone(), 0)?;
    if header.tensors.len() != net.params().len() {
        return Err(bad(format!(
            "checkpoint holds {} tensors, config needs {}",
            header.tensors.len(),
            net.params().len()
        )));
    }
    let mut expected_offset = 0;
    for (i, entry) in header.tensors.iter().enumerate() {
        let param = net.params_mut().get_mut(i);
        if entry.name != param.name || entry.shape != param.value.shape() {
            return Err(bad(format!(
                "tensor {i} is {} {:?}, config expects {} {:?}",
                entry.name,
                entry.shape,
                param.name,
                param.value.shape()
            )));
        }
        if entry.dtype != "f32" {
            return Err(bad(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        if entry.offset != expected_offset {
            return Err(bad(format!(
                "{}: offset {} but previous tensors end at {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let n = param.value.numel();
        let raw = blob
            .get(entry.offset..entry.offset + 4 * n)
            .ok_or_else(|| bad(format!("{}: blob truncated", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        param.value = Tensor::new(entry.shape.clone(), data)?;
        expected_offset += 4 * n;
    }
    if blob.len() != expected_offset {
        return Err(bad(format!(
            "blob has {} bytes, index covers {expected_offset}",
            blob.len()
        )));
    }
    Ok(net)
}

pub fn save<T: Real>(net: &DCaps<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<DCaps<T>> {
    from_bytes(&fs::read(path)?)
}
