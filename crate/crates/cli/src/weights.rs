//! Binary weight files.
//!
//! ```text
//! magic    8 bytes  "FREDFT01"
//! count    u64
//! count x entry:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims u64 x rank
//!   values   f64 x prod(dims)
//! checksum u64      FNV-1a over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Values are stored as raw bit
//! patterns, so a round trip is exact.

use std::path::Path;

use fredft::nn::ParamStore;
use fredft::{Shape, Tensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"FREDFT01";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Every parameter and buffer of `store`, in store order.
pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let dims = p.value.shape().dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Weights(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Named tensors from a weight file, after verifying magic and checksum.
pub fn decode(bytes: &[u8]) -> CliResult<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() + 16 || &bytes[..8] != MAGIC {
        return Err(CliError::Weights("not a FREDFT01 weight file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(CliError::Weights(format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}")));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u64("entry count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CliError::Weights(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank != 4 {
            return Err(CliError::Weights(format!("{name}: rank {rank}, only rank 4 is supported")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(r.u64("dims")?).map_err(|_| CliError::Weights(format!("{name}: dimension too large")))?;
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| CliError::Weights(format!("{name}: implausible dims {dims:?}")))?;
        let raw = r.take(numel * 8, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(Shape(dims), data)?));
    }
    if r.pos != body.len() {
        return Err(CliError::Weights(format!("{} trailing bytes after the last entry", body.len() - r.pos)));
    }
    Ok(out)
}

/// Overwrites every entry of `store` from `bytes`. The file must hold
/// exactly the store's names, in any order, with matching shapes.
pub fn load_into(bytes: &[u8], store: &mut ParamStore) -> CliResult<()> {
    let entries = decode(bytes)?;
    if entries.len() != store.len() {
        return Err(CliError::Weights(format!(
            "file has {} entries, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    let mut updates = Vec::with_capacity(entries.len());
    for (name, value) in entries {
        if !seen.insert(name.clone()) {
            return Err(CliError::Weights(format!("duplicate entry `{name}`")));
        }
        let id = store
            .id(&name)
            .map_err(|_| CliError::Weights(format!("unexpected entry `{name}`")))?;
        let want = store.get(id).shape();
        if value.shape() != want {
            return Err(CliError::Weights(format!("{name}: shape {} in file, model expects {want}", value.shape())));
        }
        updates.push((id, value));
    }
    // nothing is written unless the whole file matches
    for (id, value) in updates {
        store.set(id, value)?;
    }
    Ok(())
}

pub fn save(path: &Path, store: &ParamStore) -> CliResult<()> {
    std::fs::write(path, encode(store)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path, store: &mut ParamStore) -> CliResult<()> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    load_into(&bytes, store)
}
