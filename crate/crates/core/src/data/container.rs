//! CSNT tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSNT" | version: u16 | entries: u32
//! per entry: name_len: u16 | name (ASCII) | rank: u8 | dims: u32 * rank
//!            | payload: f32 * prod(dims) | crc32(payload bytes): u32
//! ```
//!
//! Values are stored as f32 and widened to f64 on read.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSNT";
pub const VERSION: u16 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        if !name.is_ascii() {
            return Err(Error::Format(format!("entry name `{name}` is not ASCII")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("entry name too long: {}", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        let start = out.len();
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Format(format!("entry `{name}` holds a value not representable as finite f32: {v}")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
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
            Error::Format(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a CSNT container".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .ok()
            .filter(|s| s.is_ascii())
            .ok_or_else(|| Error::Format("entry name is not ASCII".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        if rank == 0 {
            return Err(Error::Format(format!("entry `{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::Format(format!("entry `{name}` dimensions overflow")))?;
        let payload = r.take(numel * 4, "payload")?;
        let crc = r.u32("checksum")?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Format(format!("checksum mismatch in entry `{name}`")));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a".into(), Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap()),
            ("stage1.block0.conv.w".into(), Tensor::full(vec![1, 1, 3, 3], 0.25)),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let entries = sample();
        let back = decode(&encode(&entries).unwrap()).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn empty_container_is_valid() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 10);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [3, 9, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn checksum_mismatch_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        // First payload byte of entry "a": 4+2+4 header, 2+1 name, 1 rank, 8 dims.
        bytes[22] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("checksum")));
    }

    #[test]
    fn non_ascii_and_overflowing_values_rejected() {
        assert!(encode(&[("é".into(), Tensor::scalar(1.0))]).is_err());
        assert!(encode(&[("x".into(), Tensor::scalar(1e300))]).is_err());
    }
}
