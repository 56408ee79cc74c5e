//! Binary parameter checkpoint.
//!
//! Layout: magic `PCN1`, then per tensor until end of file:
//! `u32 name_len | name (UTF-8) | u32 rank | rank × u32 dims | f64 payload`,
//! all little-endian.

use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCN1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = store.shape(id);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in store.value(id) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<CheckpointTensor>> {
    let fail = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail("missing PCN1 magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let mut tensors = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32().ok_or_else(|| fail("truncated name length".into()))? as usize;
        let name = cur
            .take(name_len)
            .ok_or_else(|| fail("truncated tensor name".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| fail("tensor name is not UTF-8".into()))?;
        let rank = cur.u32().ok_or_else(|| fail(format!("{name}: truncated rank")))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32().ok_or_else(|| fail(format!("{name}: truncated dims")))? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur
            .take(numel * 8)
            .ok_or_else(|| fail(format!("{name}: truncated payload")))?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(CheckpointTensor { name, shape, values });
    }
    Ok(tensors)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in proptest::collection::vec(any::<f64>(), 6),
            s in any::<f64>(),
        ) {
            let mut store = ParamStore::new();
            store.add("layer.weight", &[2, 3], a.clone(), true);
            store.add("log_scale", &[], vec![s], false);
            let bytes = encode_checkpoint(&store);
            let back = decode_checkpoint(&bytes, Path::new("x")).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].shape, &vec![2, 3]);
            prop_assert!(back[1].shape.is_empty());
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].values), bits(&a));
            prop_assert_eq!(back[1].values[0].to_bits(), s.to_bits());
            let mut other = store.clone();
            other.assign_from(back.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.values.as_slice()))).unwrap();
            prop_assert_eq!(encode_checkpoint(&other), bytes);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_checkpoint(b"PCN0", Path::new("x")).is_err());
        let mut store = ParamStore::new();
        store.add("w", &[2], vec![1.0, 2.0], true);
        let bytes = encode_checkpoint(&store);
        let err = decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn layout_is_little_endian() {
        let mut store = ParamStore::new();
        store.add("g", &[1], vec![1.0], false);
        let bytes = encode_checkpoint(&store);
        let mut want = b"PCN1".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, b'g', 1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, want);
    }
}
