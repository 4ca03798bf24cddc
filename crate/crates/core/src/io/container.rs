use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LSTN";
pub const VERSION: u16 = 1;
/// Little-endian IEEE-754 binary64.
pub const DTYPE_F64: u8 = 0;

/// Serialise named tensors into the container byte layout.
///
/// Names must be unique and at most `u16::MAX` bytes; every dimension must fit a `u32`.
pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
    }
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Malformed("too many tensors".into()))?;
    let payload: usize = tensors.iter().map(|(n, t)| 4 + n.len() + 4 * t.ndim() + 8 * t.numel()).sum();
    let mut out = Vec::with_capacity(10 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Malformed(format!("name of {} bytes is too long", name.len())))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Malformed(format!("{name}: too many dimensions")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Malformed(format!("{name}: dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!("{what} needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parse a container, validating magic, version, dtypes and sizes.
///
/// Entries keep file order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            Error::Truncated(format!("{} bytes is shorter than the magic", bytes.len()))
        } else {
            Error::BadMagic
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for entry in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Malformed(format!("entry {entry}: name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::UnknownDtype(dtype));
        }
        let ndim = r.u8("ndim")? as usize;
        if ndim == 0 {
            return Err(Error::Malformed(format!("{name}: zero dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Malformed(format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(numel, &format!("payload of {name:?}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!("{} trailing bytes after the last entry", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Write a container atomically and durably.
pub fn write_tensors(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&std::fs::read(path)?)
}

/// [`read_tensors`] keyed by name.
pub fn read_tensor_map(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    Ok(read_tensors(path)?.into_iter().collect())
}
