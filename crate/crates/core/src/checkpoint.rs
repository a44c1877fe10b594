//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `WPGREC1\n`, then for every parameter in store
//! order: name length (u64), UTF-8 name, rank (u64), each dim (u64), and the
//! values (f64). All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WPGREC1\n";

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing WPGREC1 magic".into()));
    }
    let mut cur = Cursor {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut store = ParameterStore::new(0);
    while cur.pos < bytes.len() {
        let len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u64()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParameterStore) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
