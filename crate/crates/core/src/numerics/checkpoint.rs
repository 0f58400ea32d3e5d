//! Versioned binary container for named f32 tensors plus string metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MITOCKPT"
//! version  u32      = 1
//! n_meta   u32, then n_meta × (key: str, value: str)
//! n_tensor u32, then n_tensor × (name: str, ndim: u32, dims: ndim × u64, data: numel × f32)
//! str      u32 byte length + UTF-8 bytes
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load cycle is exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{NumericsError, Tensor};

const MAGIC: &[u8; 8] = b"MITOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    /// Insertion order is preserved on disk.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
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
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NumericsError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..get_u32(&mut r)? {
            let k = get_str(&mut r)?;
            let v = get_str(&mut r)?;
            ck.meta.insert(k, v);
        }
        for _ in 0..get_u32(&mut r)? {
            let name = get_str(&mut r)?;
            let ndim = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(4) > r.len() {
                return Err(NumericsError::Checkpoint(format!("tensor {name} is truncated")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f32::from_bits(get_u32(&mut r)?));
            }
            ck.tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(NumericsError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        fs::File::create(path).and_then(|mut f| f.write_all(&self.to_bytes())).map_err(|e| with_path(e, path))
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        Self::from_bytes(&fs::read(path).map_err(|e| with_path(e, path))?)
    }
}

fn with_path(e: std::io::Error, path: &Path) -> NumericsError {
    NumericsError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), NumericsError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => NumericsError::Checkpoint("unexpected end of checkpoint".into()),
        _ => NumericsError::Io(e),
    })
}

fn get_u32(r: &mut &[u8]) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String, NumericsError> {
    let len = get_u32(r)? as usize;
    if len > r.len() {
        return Err(NumericsError::Checkpoint("string runs past end of checkpoint".into()));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| NumericsError::Checkpoint("string is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 0..4),
            bits in proptest::collection::vec(any::<u32>(), 64),
            key in "[a-z.]{1,12}",
            val in ".{0,20}",
        ) {
            let numel: usize = dims.iter().product();
            let data: Vec<f32> = (0..numel).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
            let mut ck = Checkpoint::new();
            ck.meta.insert(key, val);
            ck.insert("t", Tensor::new(dims, data.clone()).unwrap());
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(&back.meta, &ck.meta);
            let got: Vec<u32> = back.get("t").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut ck = Checkpoint::new();
        ck.insert("w", Tensor::<f32>::zeros(&[4]));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
