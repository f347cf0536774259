//! Binary named-tensor files.
//!
//! Layout (little-endian): magic `DID3`, `u32` version, `u32` tensor count,
//! then per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u64`
//! extents and row-major `f32` values. Tensors are written in name order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"DID3";
pub const VERSION: u32 = 1;

pub fn encode_weights(tensors: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos as u64, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected `DID3`");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_owned(),
            Err(_) => {
                r.pos -= len;
                return r.fail("tensor name is not UTF-8");
            }
        };
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = r.u64("extent")?;
            numel = match usize::try_from(e).ok().filter(|&e| e > 0).and_then(|e| numel.checked_mul(e)) {
                Some(n) => n,
                None => {
                    r.pos -= 8;
                    return r.fail(format!("invalid extent {e} in `{name}`"));
                }
            };
            shape.push(e as usize);
        }
        if rank == 0 {
            return r.fail(format!("tensor `{name}` has rank 0"));
        }
        let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), "values")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let tensor = Tensor::from_vec(&shape, data).expect("extents validated above");
        if store.insert(name.clone(), tensor).is_some() {
            r.pos = start;
            return r.fail(format!("duplicate tensor `{name}`"));
        }
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(store)
}

pub fn save_weights(path: impl AsRef<Path>, tensors: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w".into(), Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.1, 1e-3, 7.0]).unwrap());
        s.insert("b".into(), Tensor::vector(vec![0.5]));
        s
    }

    #[test]
    fn round_trip_within_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dtw");
        save_weights(&path, &sample()).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.keys().collect::<Vec<_>>(), vec!["b", "w"]);
        for (name, t) in sample() {
            assert_eq!(back[&name].shape(), t.shape());
            for (a, b) in back[&name].data().iter().zip(t.data()) {
                assert!((a - b).abs() <= 1e-7 * b.abs());
            }
        }
    }

    #[test]
    fn empty_list() {
        let bytes = encode_weights(&ParamStore::new());
        assert_eq!(bytes, b"DID3\x01\0\0\0\0\0\0\0");
        assert!(decode_weights(&bytes).unwrap().is_empty());
    }

    #[test]
    fn exact_layout() {
        let mut s = ParamStore::new();
        s.insert("ab".into(), Tensor::vector(vec![1.0]));
        let mut expected = b"DID3".to_vec();
        for word in [1u32, 1, 2] {
            expected.extend_from_slice(&word.to_le_bytes());
        }
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1f32.to_le_bytes());
        assert_eq!(encode_weights(&s), expected);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_weights(&sample());
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            match decode_weights(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_header() {
        let mut bytes = encode_weights(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode_weights(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_weights(&sample());
        bytes[4] = 2;
        assert!(matches!(decode_weights(&bytes), Err(Error::Format { offset: 4, .. })));
        let mut bytes = encode_weights(&sample());
        bytes.push(0);
        assert!(matches!(decode_weights(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_weights(dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
