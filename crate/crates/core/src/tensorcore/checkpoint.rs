//! Binary checkpoint format.
//!
//! ```text
//! b"TCGPN001"
//! u64 little-endian: manifest length in bytes
//! manifest (UTF-8, one record per line):
//!     meta <key> <value>
//!     tensor <path> <dtype> <d0,d1,..> <byte offset>
//! raw little-endian tensor values, offsets relative to the end of the manifest
//! ```

use std::path::Path;

use super::params::ParamStore;
use super::real::{DType, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TCGPN001";

/// A decoded checkpoint: parameters plus free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub meta: Vec<(String, String)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn encode<T: Real>(params: &ParamStore<T>, meta: &[(String, String)]) -> Result<Vec<u8>> {
    let mut manifest = String::new();
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("meta entry {k:?} is not encodable")));
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut blob = Vec::new();
    for (path, t) in params.iter() {
        if path.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("path {path:?} contains whitespace")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!(
            "tensor {path} {} {} {}\n",
            T::DTYPE.name(),
            dims.join(","),
            blob.len()
        ));
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let mut out = Vec::with_capacity(16 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing TCGPN001 magic"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
    let blob = &bytes[16 + mlen..];

    let mut params = ParamStore::new(0);
    let mut meta = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.splitn(3, ' ').collect();
        match fields.as_slice() {
            ["meta", k, v] => meta.push((k.to_string(), v.to_string())),
            ["tensor", path, rest] => {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [dtype, dims, offset] = parts.as_slice() else {
                    return Err(bad(&format!("manifest line {}: malformed tensor record", lineno + 1)));
                };
                let dtype = DType::parse(dtype).ok_or_else(|| bad(&format!("unknown dtype {dtype}")))?;
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(&format!("bad shape for {path}")))?;
                let offset: usize = offset.parse().map_err(|_| bad(&format!("bad offset for {path}")))?;
                let numel: usize = shape.iter().product();
                let width = dtype.size();
                let raw = blob
                    .get(offset..offset + numel * width)
                    .ok_or_else(|| bad(&format!("data for {path} out of range")))?;
                let data: Vec<T> = raw
                    .chunks_exact(width)
                    .map(|c| match dtype {
                        DType::F32 => T::of(f32::read_le(c) as f64),
                        DType::F64 => T::of(f64::read_le(c)),
                    })
                    .collect();
                params.insert(path.to_string(), Tensor::new(shape, data)?);
            }
            _ => return Err(bad(&format!("manifest line {}: unrecognised record", lineno + 1))),
        }
    }
    Ok(Checkpoint { params, meta })
}

pub fn save<T: Real>(path: &Path, params: &ParamStore<T>, meta: &[(String, String)]) -> Result<()> {
    let bytes = encode(params, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_preserves_values(vals in prop::collection::vec(-1e6f32..1e6, 1..40), cols in 1usize..4) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let data = vals[..rows * cols].to_vec();
            let mut s = ParamStore::<f32>::new(1);
            s.insert("a.weight", Tensor::new(vec![rows, cols], data.clone()).unwrap());
            s.insert("a.bias", Tensor::new(vec![cols], vec![0.5; cols]).unwrap());
            let meta = vec![("d_model".to_string(), "8".to_string())];
            let ck: Checkpoint<f32> = decode(&encode(&s, &meta).unwrap()).unwrap();
            prop_assert_eq!(ck.params.get("a.weight").unwrap().data(), &data[..]);
            prop_assert_eq!(ck.params.get("a.weight").unwrap().shape(), &[rows, cols]);
            prop_assert_eq!(ck.meta("d_model"), Some("8"));
        }
    }

    #[test]
    fn starts_with_magic_and_rejects_garbage() {
        let mut s = ParamStore::<f64>::new(0);
        s.insert("w", Tensor::scalar(1.0));
        let bytes = encode(&s, &[]).unwrap();
        assert_eq!(&bytes[..8], b"TCGPN001");
        assert!(decode::<f64>(b"NOTACKPT00000000").is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let mut s = ParamStore::<f32>::new(0);
        s.insert("w", Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
        let ck: Checkpoint<f64> = decode(&encode(&s, &[]).unwrap()).unwrap();
        assert_eq!(ck.params.get("w").unwrap().data(), &[0.25, -1.5]);
    }
}
