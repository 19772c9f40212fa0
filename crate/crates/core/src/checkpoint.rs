//! Named-array checkpoints.
//!
//! Layout: the 8-byte magic `FTPCKPT1`, a little-endian `u64` header length,
//! a JSON header (dtype, free-form config echo, and one `{name, shape,
//! offset}` entry per array), then the raw little-endian `f64` payload.
//! Offsets count elements from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"FTPCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: Value,
    entries: Vec<Entry>,
}

pub fn encode(arrays: &ParamSet, config: &Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, t) in arrays {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        dtype: "f64".into(),
        config: config.clone(),
        entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in arrays.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamSet, Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..)
        .and_then(|b| b.get(..hlen).map(|h| (h, &b[hlen..])))
        .ok_or_else(|| bad("truncated header"))?;
    let (header, payload) = body;
    let header: Header = serde_json::from_slice(header)?;
    if header.dtype != "f64" {
        return Err(bad(&format!("unsupported dtype {}", header.dtype)));
    }
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut arrays = ParamSet::new();
    for e in header.entries {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(&format!("array `{}` runs past the payload", e.name)))?;
        arrays.insert(e.name, Tensor::new(e.shape, data.to_vec())?);
    }
    Ok((arrays, header.config))
}

pub fn save(path: &Path, arrays: &ParamSet, config: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(arrays, config)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamSet, Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = ParamSet::new();
        a.insert("w".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5e300]).unwrap());
        a.insert("b".into(), Tensor::scalar(0.1));
        let cfg = json!({"seed": 3});
        let (b, c) = decode(&encode(&a, &cfg).unwrap()).unwrap();
        assert_eq!(c, cfg);
        for (k, t) in &a {
            assert_eq!(b[k].shape(), t.shape());
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let back: Vec<u64> = b[k].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, back);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(decode(b"nope").is_err());
        let mut a = ParamSet::new();
        a.insert("w".into(), Tensor::zeros(vec![4]));
        let bytes = encode(&a, &Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 8]).is_err());
    }
}
