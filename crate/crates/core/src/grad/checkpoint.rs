//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SEDKCKPT"
//! version   u32
//! seed      u64
//! n_meta    u32, then n_meta × (key: str, value: str)
//! n_tensor  u32, then n_tensor × (name: str, rank: u32, dims: rank × u64, data: numel × f64)
//! str       u32 byte length + UTF-8 bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SEDKCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(seed: u64) -> Self {
        Self {
            version: FORMAT_VERSION,
            seed,
            metadata: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Append every tensor of `store` under `prefix`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Fill `store` from tensors saved under `prefix`. Every parameter must
    /// be present with a matching shape.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let key = format!("{prefix}{}", store.name(id));
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key}: shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let n_meta = r.u32()? as usize;
        let mut metadata = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            metadata.push((r.string()?, r.string()?));
        }
        let n_tensor = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensor.min(1024));
        for _ in 0..n_tensor {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            version,
            seed,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            seed in any::<u64>(),
            bits in proptest::collection::vec(any::<u64>(), 0..40),
            cols in 1usize..5,
        ) {
            // arbitrary bit patterns, including NaN payloads and signed zeros
            let rows = bits.len() / cols;
            let data: Vec<f64> = bits[..rows * cols].iter().map(|&b| f64::from_bits(b)).collect();
            let mut ck = Checkpoint::new(seed);
            ck.set_meta("env", "source_location");
            ck.tensors.push(("flow/w".into(), Tensor::matrix(rows, cols, data).unwrap()));
            ck.tensors.push(("s".into(), Tensor::new(vec![], vec![1.5]).unwrap()));
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.seed, seed);
            prop_assert_eq!(&back.metadata, &ck.metadata);
            for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|x| x.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new(1);
        ck.tensors.push(("a".into(), Tensor::zeros(2, 2)));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn store_round_trip_with_prefix() {
        let mut rng = crate::rng::Rng::new(0);
        let mut store = ParamStore::new();
        store.add_glorot("w", 3, 2, &mut rng);
        let mut ck = Checkpoint::new(0);
        ck.add_store("flow/", &store);
        let mut other = store.clone();
        other.tensors_mut()[0].data_mut().iter_mut().for_each(|x| *x = 0.0);
        ck.load_store("flow/", &mut other).unwrap();
        assert_eq!(other.tensors()[0], store.tensors()[0]);
        assert!(ck.load_store("policy/", &mut other).is_err());
    }
}
