//! `MSLCKPT1` parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MSLCKPT1"
//! repeated until end of file:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   rank     u32
//!   dims     rank × u64
//!   values   product(dims) × f64, row-major
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MSLCKPT1";

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params).expect("writing to a Vec cannot fail");
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamSet> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("checkpoint magic mismatch (expected MSLCKPT1)".into()));
    }
    let mut c = Cursor {
        buf,
        pos: MAGIC.len(),
    };
    let mut params = ParamSet::new();
    while c.pos < buf.len() {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("oversized tensor".into()))?, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        params
            .insert(name, t)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(params)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}
