//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "FRCK"
//! version    u32      currently 1
//! count      u64      number of entries
//! per entry:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u64, dims (rank x u64)
//!   data     product(dims) x f64
//! ```

use std::fs;
use std::path::Path;

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FRCK";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u64).to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a container; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let err = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(err)?;
    if magic != MAGIC {
        return Err(err(format!("bad magic bytes {magic:?}, expected \"FRCK\"")));
    }
    let version = r.u32().map_err(err)?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { path: path.to_path_buf(), found: version, expected: VERSION });
    }
    let count = r.u64().map_err(err)?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.u32().map_err(err)? as usize;
        let name = std::str::from_utf8(r.take(name_len).map_err(err)?)
            .map_err(|e| err(format!("entry {i}: name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u64().map_err(err)? as usize;
        if rank > 8 {
            return Err(err(format!("entry `{name}`: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().map_err(err)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| err(format!("entry `{name}`: size overflow")))?).map_err(err)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(name, Array::new(shape, data)?).map_err(|e| err(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
    decode(&bytes, path)
}
