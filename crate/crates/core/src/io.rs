//! Binary feature-bag and weight files.
//!
//! `.fbag`: `"MTFB"`, u32 version (1), u32 n_tokens, u32 dim, then row-major
//! little-endian f32.
//!
//! `.mtw`: `"MTWT"`, u32 version (1), u32 block count, then per block a u16
//! name length and UTF-8 name, a u8 rank and that many u32 dims, and the
//! little-endian f32 payload.

use std::fs;
use std::path::Path;

use crate::encoder::FeatureBag;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor2D};

const FBAG_MAGIC: &[u8; 4] = b"MTFB";
const MTW_MAGIC: &[u8; 4] = b"MTWT";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.kind,
                format!("truncated at byte {} (need {n} more)", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::format(self.kind, "payload size overflows")
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(self.kind, "bad magic"));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::format(self.kind, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.kind,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode_fbag(features: &Tensor2D<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * features.len());
    out.extend_from_slice(FBAG_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fbag(bytes: &[u8]) -> Result<Tensor2D<f32>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        kind: "fbag",
    };
    r.header(FBAG_MAGIC)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let data = r.f32s(n * d)?;
    r.finish()?;
    Tensor2D::new(n, d, data)
}

pub fn write_fbag(path: &Path, bag: &FeatureBag) -> Result<()> {
    fs::write(path, encode_fbag(&bag.features)).map_err(|e| Error::io(path, e))
}

pub fn read_fbag(path: &Path, patient_id: &str) -> Result<FeatureBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureBag::new(patient_id, decode_fbag(&bytes)?)
}

pub fn encode_mtw<T: Real>(blocks: &[(String, Tensor2D<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MTW_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::format("mtw", format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Rank-1 blocks load as row vectors; rank 0 as a 1x1 tensor.
pub fn decode_mtw<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor2D<T>)>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        kind: "mtw",
    };
    r.header(MTW_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("mtw", "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8()?;
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [rows, cols] => (*rows, *cols),
            _ => {
                return Err(Error::format(
                    "mtw",
                    format!("{name}: rank {rank} not supported"),
                ))
            }
        };
        let data = r.f32s(rows * cols)?;
        out.push((
            name,
            Tensor2D::new(rows, cols, data.into_iter().map(|v| T::lit(f64::from(v))).collect())?,
        ));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_mtw<T: Real>(path: &Path, blocks: &[(String, Tensor2D<T>)]) -> Result<()> {
    fs::write(path, encode_mtw(blocks)?).map_err(|e| Error::io(path, e))
}

pub fn read_mtw<T: Real>(path: &Path) -> Result<Vec<(String, Tensor2D<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mtw(&bytes)
}
