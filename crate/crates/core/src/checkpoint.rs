//! Flat binary checkpoint format.
//!
//! ```text
//! "CSLE" | version u32 | param count u32
//! per param: name len u16 | name bytes | rank u8 | extents u32 × rank | f64 values
//! ```
//! All integers and floats are little-endian. The digest is the SHA-256 of
//! the complete byte stream, hex encoded.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::EncoderState;

pub const MAGIC: &[u8; 4] = b"CSLE";
pub const VERSION: u32 = 1;

pub fn encode(params: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let data = r.f64s(n)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encoder_bytes(enc: &EncoderState) -> Vec<u8> {
    encode(&enc.named_params())
}

pub fn encoder_digest(enc: &EncoderState) -> String {
    digest(&encoder_bytes(enc))
}

/// Writes the encoder and returns its digest.
pub fn save(enc: &EncoderState, path: &Path) -> Result<String> {
    let bytes = encoder_bytes(enc);
    std::fs::write(path, &bytes)?;
    Ok(digest(&bytes))
}

pub fn load(path: &Path) -> Result<EncoderState> {
    let bytes = std::fs::read(path)?;
    EncoderState::from_named(decode(&bytes)?, 0)
}
