//! Binary container for named tensors plus string metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EMOATTN\x01"
//! u32      metadata entry count
//!   u32 key length, key bytes, u32 value length, value bytes
//! u32      tensor count
//!   u32 name length, name bytes
//!   u8  dtype (1 = f64)
//!   u32 rank, then rank x u64 extents
//!   prod(extents) x f64 values
//! ```
//!
//! Entries are written in name order, so equal archives serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EMOATTN\x01";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let mut tensor = tensor;
        tensor.clear_grad();
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a tensor archive".into()));
        }
        let mut archive = TensorArchive::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            archive.meta.insert(k, v);
        }
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let mut dtype = [0u8];
            r.read_exact(&mut dtype)?;
            if dtype[0] != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("`{name}`: unsupported dtype {}", dtype[0])));
            }
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            archive.tensors.insert(name, t);
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(any::<f64>(), 1..40),
            key in "[a-z.]{1,12}",
            note in ".{0,20}",
        ) {
            let mut a = TensorArchive::new();
            let n = values.len();
            a.insert(key.clone(), Tensor::new(&[n], values).unwrap());
            a.meta.insert("note".into(), note);
            let bytes = a.to_bytes();
            let b = TensorArchive::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(b.to_bytes(), bytes);
            let before: Vec<u64> = a.tensors[&key].data().iter().map(|v| v.to_bits()).collect();
            let after: Vec<u64> = b.tensors[&key].data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(TensorArchive::read_from(&mut &b"NOTANARCHIVE"[..]).is_err());
    }
}
