//! Binary checkpoint format.
//!
//! ```text
//! b"DSAMP\x01"
//! u64 LE   header length in bytes
//! header   UTF-8 JSON: {"meta": <any>, "tensors": [{"name", "shape", "offset"}]}
//! payload  little-endian f64 values; each tensor row-major at `offset`
//!          bytes from the start of the payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::GradError;

pub const MAGIC: &[u8; 6] = b"DSAMP\x01";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    /// Adds every slot of `store` under `prefix/`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for slot in 0..store.len() {
            let v = store.value(slot);
            self.tensors.push(NamedTensor {
                name: format!("{prefix}/{}", store.name(slot)),
                shape: vec![v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            });
        }
    }

    /// Overwrites `store` slots from the tensors under `prefix/`. Every slot
    /// must be present with a matching shape.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<(), GradError> {
        for slot in 0..store.len() {
            let name = format!("{prefix}/{}", store.name(slot));
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| GradError::Checkpoint(format!("missing tensor {name}")))?;
            let dim = store.value(slot).dim();
            if t.shape != [dim.0, dim.1] {
                return Err(GradError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape,
                    [dim.0, dim.1]
                )));
            }
            let arr = Array2::from_shape_vec(dim, t.data.clone())
                .map_err(|e| GradError::Checkpoint(e.to_string()))?;
            store.value_mut(slot).assign(&arr);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset };
                offset += 8 * t.data.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Manifest { meta: self.meta.clone(), tensors: entries })
            .expect("manifest serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GradError> {
        let bad = |m: &str| GradError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let hlen = u64::from_le_bytes(len) as usize;
        let hstart = MAGIC.len() + 8;
        let payload = hstart.checked_add(hlen).filter(|&p| p <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[hstart..payload]).map_err(|e| GradError::Checkpoint(e.to_string()))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = payload + e.offset as usize;
            let end = start + 8 * n;
            if end > bytes.len() {
                return Err(bad("truncated payload"));
            }
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name: e.name, shape: e.shape, data });
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), GradError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, GradError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut s = ParamStore::new();
        s.insert("w", array![[1.0, 2.0]]).unwrap();
        let mut c = Checkpoint::new(serde_json::json!({"k": 1}));
        c.add_store("online", &s);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..6], b"DSAMP\x01");
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[14..14 + hlen]).unwrap();
        assert_eq!(header["tensors"][0]["name"], "online/w");
        assert_eq!(header["tensors"][0]["shape"], serde_json::json!([1, 2]));
        let payload = &bytes[14 + hlen..];
        assert_eq!(f64::from_le_bytes(payload[8..16].try_into().unwrap()), 2.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert!(Checkpoint::from_bytes(b"DSAMP\x01\xff\xff\xff\xff\x00\x00\x00\x00").is_err());
    }

    proptest! {
        #[test]
        fn flat_and_file_round_trips_are_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(vals.len());
            let mut s = ParamStore::new();
            s.insert("a", Array2::from_shape_vec((1, split), vals[..split].to_vec()).unwrap()).unwrap();
            s.insert("b", Array2::from_shape_vec((vals.len() - split, 1), vals[split..].to_vec()).unwrap()).unwrap();

            let flat = s.to_flat();
            let mut other = s.clone();
            other.load_flat(&flat).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&other.to_flat()), bits(&flat));

            let mut c = Checkpoint::new(serde_json::Value::Null);
            c.add_store("p", &s);
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let mut restored = s.clone();
            restored.load_flat(&vec![0.0; flat.len()]).unwrap();
            back.restore_store("p", &mut restored).unwrap();
            prop_assert_eq!(bits(&restored.to_flat()), bits(&flat));
        }
    }
}
