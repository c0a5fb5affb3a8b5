//! Manifest-plus-blob tensor container shared by checkpoints and embedding
//! dumps.
//!
//! ```text
//! magic (5 bytes, e.g. "SKFM1")
//! u64 manifest byte length
//! manifest: UTF-8 lines "key=value"; tensors are listed as
//!           "tensor.<name>=<rows>,<cols>,<byte offset into the blob>"
//! blob: contiguous little-endian f32, row-major per tensor
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::bin_io::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::Params;

pub const MODEL_MAGIC: &[u8] = b"SKFM1";
pub const EMBEDDING_MAGIC: &[u8] = b"SKEM1";

const TENSOR_PREFIX: &str = "tensor.";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    meta: BTreeMap<String, String>,
    tensors: Vec<(String, Array2<f32>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> Result<()> {
        let key = key.into();
        let value = value.to_string();
        if key.is_empty() || key.contains(['=', '\n']) || key.starts_with(TENSOR_PREFIX) {
            return Err(Error::Format(format!("invalid manifest key {key:?}")));
        }
        if value.contains('\n') {
            return Err(Error::Format(format!("manifest value for {key} spans lines")));
        }
        self.meta.insert(key, value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("manifest has no key {key}")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("manifest key {key} has unparsable value {raw:?}")))
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    /// Entries under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, String> {
        let p = format!("{prefix}.");
        self.meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|k| (k.to_string(), v.clone())))
            .collect()
    }

    pub fn set_section<K: AsRef<str>, V: ToString>(
        &mut self,
        prefix: &str,
        entries: impl IntoIterator<Item = (K, V)>,
    ) -> Result<()> {
        for (k, v) in entries {
            self.set(format!("{prefix}.{}", k.as_ref()), v)?;
        }
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Array2<f32>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(['=', '\n']) {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        if self.tensor(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Array2<f32>> {
        self.tensor(name)
            .ok_or_else(|| Error::Format(format!("container has no tensor {name}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn push_params(&mut self, prefix: &str, p: &Params<f32>) -> Result<()> {
        for (name, t) in p.iter() {
            self.push_tensor(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Tensors under `prefix.`, in stored order.
    pub fn params(&self, prefix: &str) -> Params<f32> {
        let p = format!("{prefix}.");
        let mut out = Params::new();
        for (name, t) in &self.tensors {
            if let Some(n) = name.strip_prefix(&p) {
                out.add(n, t.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self, magic: &[u8]) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            manifest.push_str(&format!("{TENSOR_PREFIX}{name}={},{},{offset}\n", t.nrows(), t.ncols()));
            offset += t.len() * 4;
        }
        let mut w = Writer::default();
        w.bytes(magic);
        w.u64(manifest.len() as u64);
        w.bytes(manifest.as_bytes());
        for (_, t) in &self.tensors {
            for &v in t.iter() {
                w.f32(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(magic)?;
        let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("manifest too large".into()))?;
        let manifest = std::str::from_utf8(r.take(n)?)
            .map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?;
        let blob = r.take(bytes.len() - 5 - 8 - n)?;
        let mut meta = BTreeMap::new();
        let mut specs = Vec::new();
        for line in manifest.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line without '=': {line:?}")))?;
            if let Some(name) = k.strip_prefix(TENSOR_PREFIX) {
                let nums: Vec<usize> = v
                    .split(',')
                    .map(|x| x.parse().map_err(|_| Error::Format(format!("bad tensor spec {line:?}"))))
                    .collect::<Result<_>>()?;
                let [rows, cols, offset] = nums[..] else {
                    return Err(Error::Format(format!("bad tensor spec {line:?}")));
                };
                specs.push((offset, name.to_string(), rows, cols));
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        specs.sort_by_key(|s| s.0);
        let mut tensors = Vec::with_capacity(specs.len());
        let mut expected = 0usize;
        for (offset, name, rows, cols) in specs {
            if offset != expected {
                return Err(Error::Format(format!("tensor {name} at unexpected offset {offset}")));
            }
            let len = rows
                .checked_mul(cols)
                .and_then(|l| l.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let end = offset + len;
            let raw = blob
                .get(offset..end)
                .ok_or_else(|| Error::Format(format!("tensor {name} runs past the blob")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            tensors.push((name, Array2::from_shape_vec((rows, cols), data).expect("sized")));
            expected = end;
        }
        if expected != blob.len() {
            return Err(Error::Format(format!("{} unreferenced blob bytes", blob.len() - expected)));
        }
        Ok(Container { meta, tensors })
    }

    pub fn save(&self, path: &Path, magic: &[u8]) -> Result<()> {
        write_file(path, &self.to_bytes(magic))
    }

    pub fn load(path: &Path, magic: &[u8]) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, magic)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample() -> Container {
        let mut c = Container::new();
        c.set("model.d_model", 8).unwrap();
        c.set("note", "a=b c").unwrap();
        c.push_tensor("w", arr2(&[[1.5f32, -0.0], [f32::MIN_POSITIVE, 3e-9]])).unwrap();
        c.push_tensor("v", arr2(&[[7.0f32, 8.0, 9.0]])).unwrap();
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes(MODEL_MAGIC);
        let back = Container::from_bytes(&bytes, MODEL_MAGIC).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("note").unwrap(), "a=b c");
        assert_eq!(back.tensor_names().collect::<Vec<_>>(), vec!["w", "v"]);
        assert_eq!(back.tensor("w").unwrap()[[0, 1]].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes(MODEL_MAGIC);
        assert!(Container::from_bytes(&bytes, EMBEDDING_MAGIC).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], MODEL_MAGIC).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra, MODEL_MAGIC).is_err());
    }

    #[test]
    fn rejects_bad_keys() {
        let mut c = Container::new();
        assert!(c.set("a=b", 1).is_err());
        assert!(c.set("tensor.x", 1).is_err());
        assert!(c.set("k", "two\nlines").is_err());
    }
}
