//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ITTSCKPT"
//! version  u32      = 1
//! n_meta   u32
//!   key    u32 length + UTF-8 bytes
//!   value  u32 length + UTF-8 bytes
//! n_param  u32
//!   name      u32 length + UTF-8 bytes
//!   trainable u8
//!   rank      u32
//!   dims      u64 * rank
//!   data      f64 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ITTSCKPT";
pub const VERSION: u32 = 1;

/// A parameter store snapshot plus free-form string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, bool, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParameterStore, meta: BTreeMap<String, String>) -> Self {
        Checkpoint {
            meta,
            params: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.trainable, p.value.clone()))
                .collect(),
        }
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, trainable, t) in &self.params {
            put_str(&mut out, name);
            out.push(u8::from(*trainable));
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n = r.u32()?;
        let mut params = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string()?;
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push((name, trainable, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(fmt_err("trailing bytes"));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies values into a store with identical names and shapes.
    pub fn restore_into(&self, store: &mut ParameterStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(fmt_err(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, trainable, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| fmt_err(format!("unexpected parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::dim("Checkpoint::restore_into", "shape", store.value(id).shape(), t.shape()));
            }
            *store.value_mut(id) = t.clone();
            store.set_trainable(id, *trainable);
        }
        Ok(())
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| fmt_err(format!("missing metadata key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| fmt_err(format!("bad metadata value for {key}")))
    }
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| fmt_err("invalid utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>(), 1..40),
            cols in 1usize..5,
            key in "[a-z]{1,8}",
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data = values[..rows * cols].to_vec();
            let mut store = ParameterStore::new();
            store.add("m", Tensor::from_vec(&[rows, cols], data).unwrap(), true);
            store.add("s", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0]), false);
            let mut meta = BTreeMap::new();
            meta.insert(key, "v".to_string());
            let ck = Checkpoint::from_store(&store, meta);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for ((_, _, a), (_, _, b)) in ck.params.iter().zip(&back.params) {
                let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut store = ParameterStore::new();
        store.add("a", Tensor::vector(vec![1.0, 2.0]), true);
        let bytes = Checkpoint::from_store(&store, BTreeMap::new()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }
}
