//! Binary checkpoint format for parameter sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "NDGCKPT\0"
//! version  u32      currently 1
//! count    u64      number of tensors
//! entry*   repeated in lexicographic name order:
//!   name_len u32, name bytes (UTF-8),
//!   rank u32, dims u64 * rank,
//!   values f64 * product(dims), little-endian bits
//! ```
//!
//! Writing the same parameters twice yields identical bytes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::tensor::{ParameterSet, Tensor};

const MAGIC: &[u8; 8] = b"NDGCKPT\0";
const VERSION: u32 = 1;

pub fn to_bytes(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let count = r.u64()? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        params
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".to_string()));
    }
    Ok(params)
}

pub fn save(params: &ParameterSet, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".to_string()));
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParameterSet::new();
        p.insert("head/w", Tensor::xavier(4, 2, &mut rng)).unwrap();
        p.insert("head/b", Tensor::zeros(&[2])).unwrap();
        p.insert("stream0/emb", Tensor::normal(&[10, 4], 0.02, &mut rng))
            .unwrap();
        p
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let p = sample_params();
        let q = from_bytes(&to_bytes(&p)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let p = sample_params();
        assert_eq!(to_bytes(&p), to_bytes(&p));
        let q = from_bytes(&to_bytes(&p)).unwrap();
        assert_eq!(to_bytes(&p), to_bytes(&q));
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"not a checkpoint").is_err());
        let mut bytes = to_bytes(&sample_params());
        bytes.truncate(bytes.len() - 3);
        assert!(from_bytes(&bytes).is_err());
    }
}
