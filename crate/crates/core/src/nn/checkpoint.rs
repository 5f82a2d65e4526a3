//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LUM1" | u32 version | u32 meta_len | meta (UTF-8 JSON)
//! u32 count | count x (u32 name_len | name | u8 dtype | u32 ndim | ndim x u64 dim)
//! raw values of every parameter in header order
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DType, ParameterStore, Real, Tensor};
use crate::{LumError, Result};

pub const MAGIC: &[u8; 4] = b"LUM1";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(metadata: &str, store: &ParameterStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, value) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, _, value) in store.iter() {
        for &v in value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(LumError::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| LumError::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(String, ParameterStore<T>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(LumError::Checkpoint("bad magic, not a LUM1 checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LumError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let metadata = r.string()?;
    let count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| LumError::Checkpoint(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(LumError::Checkpoint(format!(
                "parameter `{name}` stored as {dtype:?}, requested {:?}",
                T::DTYPE
            )));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        headers.push((name, shape));
    }
    let mut store = ParameterStore::new();
    let width = T::DTYPE.size();
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(LumError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((metadata, store))
}

pub fn save<T: Real>(path: &Path, metadata: &str, store: &ParameterStore<T>) -> Result<Vec<u8>> {
    let bytes = encode(metadata, store);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load<T: Real>(path: &Path) -> Result<(String, ParameterStore<T>)> {
    if !path.exists() {
        return Err(LumError::MissingArtifact {
            path: path.to_path_buf(),
            hint: "checkpoint not found".into(),
        });
    }
    decode(&fs::read(path)?)
}

/// First 16 hex digits of the SHA-256 of the encoded checkpoint.
pub fn version_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
