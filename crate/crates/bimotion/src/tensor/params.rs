//! Named parameter store with a flat binary container.
//!
//! Container layout (all little-endian):
//! magic `BIMW`, u32 version, u32 entry count, then per entry:
//! u16 name length, UTF-8 name bytes, u8 rank, rank x u32 dims, f32 payload.
//! Entries are written in sorted name order, so identical stores produce
//! identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;

use super::{init, Init, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BIMW";
const VERSION: u32 = 1;

/// Name -> tensor map with deterministic (sorted) iteration order.
pub struct ParamStore<S: Scalar> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    /// Fetches an existing parameter or creates it with the given shape and
    /// initializer. Errors if an existing entry disagrees on shape.
    pub fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<S>> {
        if let Some(t) = self.entries.get(name) {
            if t.shape() != shape {
                return Err(Error::shape(
                    "param_store",
                    format!("{name}: stored {:?}, requested {:?}", t.shape(), shape),
                ));
            }
            return Ok(t.clone());
        }
        let data = init::materialize(init, rng, shape);
        let t = Tensor::param(shape, data)?;
        self.entries.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Deterministic iteration in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Tensors whose names start with `prefix`, sorted.
    pub fn with_prefix(&self, prefix: &str) -> Vec<Tensor<S>> {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn zero_grads(&self) {
        for t in self.entries.values() {
            t.zero_grad();
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::Format(format!("parameter name too long: {name}")));
            }
            w.write_u16::<LittleEndian>(bytes.len() as u16)?;
            w.write_all(bytes)?;
            let shape = t.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("rank too large for {name}")));
            }
            w.write_u8(shape.len() as u8)?;
            for &d in shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data().iter() {
                w.write_f32::<LittleEndian>(v.to_f64() as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}, expected BIMW", magic)));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(S::from_f64(r.read_f32::<LittleEndian>()? as f64));
            }
            let t = Tensor::param(&shape, data)?;
            entries.insert(name, t);
        }
        Ok(ParamStore { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_is_bit_exact_for_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f32>::new();
        store.get_or_init("conv.w", &[2, 3, 3, 3], Init::KaimingConv, &mut rng).unwrap();
        store.get_or_init("attn.wq", &[8, 8], Init::TruncNormal { std: 0.02 }, &mut rng).unwrap();
        store.get_or_init("conv.b", &[2], Init::Zeros, &mut rng).unwrap();

        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let loaded = ParamStore::<f32>::read_from(bytes.as_slice()).unwrap();

        assert_eq!(store.len(), loaded.len());
        for ((n1, t1), (n2, t2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let (d1, d2) = (t1.data(), t2.data());
            assert!(d1.iter().zip(d2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        let mut bytes2 = Vec::new();
        loaded.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"WXYZ\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(ParamStore::<f32>::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn shape_conflict_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        store.get_or_init("w", &[2, 2], Init::Zeros, &mut rng).unwrap();
        assert!(store.get_or_init("w", &[3, 2], Init::Zeros, &mut rng).is_err());
    }
}
