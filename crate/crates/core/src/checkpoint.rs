//! Checkpoint container shared by the hybrid model and the language model.
//!
//! Layout, integers little-endian, strings as `u32` byte length + UTF-8:
//! `b"HCTC"`, `u32` version, kind string, architecture JSON string,
//! vocabulary string, `u32` tensor count, then per tensor its name,
//! `u32` rank, `u64` extents, and the values as `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCTC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub arch: String,
    pub vocab: String,
    pub params: ParamStore<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::TooLarge(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("extent {v} too large")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.params.num_values() * 8 + 1024);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind)?;
        put_str(&mut out, &self.arch)?;
        put_str(&mut out, &self.vocab)?;
        put_u32(&mut out, self.params.len())?;
        for (_, name, t) in self.params.iter() {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let arch = r.string()?;
        let vocab = r.string()?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} exceeds file")))?;
            let data = r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.add(name, t)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { kind, arch, vocab, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}
