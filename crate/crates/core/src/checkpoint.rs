//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FLTL" | version: u32 | d: u64 | n_segments: u32
//! per segment: name_len: u32 | name (UTF-8) | offset: u64 | rank: u32 | dims: u64 × rank
//! d × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{Layout, ParameterVector, Segment};

pub const MAGIC: &[u8; 4] = b"FLTL";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParameterVector) -> Vec<u8> {
    let layout = params.layout();
    let mut out = Vec::with_capacity(32 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out.extend_from_slice(&(layout.segments().len() as u32).to_le_bytes());
    for s in layout.segments() {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.offset as u64).to_le_bytes());
        out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for &d in &s.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, "size does not fit in usize"))
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<ParameterVector> {
    let mut c = Cursor { buf, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let d = c.usize()?;
    let n_segments = c.u32()? as usize;
    let mut segments = Vec::with_capacity(n_segments.min(1024));
    for _ in 0..n_segments {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::format(path, "segment name is not UTF-8"))?
            .to_owned();
        let offset = c.usize()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
        segments.push(Segment { name, offset, shape });
    }
    let layout = Layout::new(segments).map_err(|e| Error::format(path, e.to_string()))?;
    if layout.len() != d {
        return Err(Error::format(
            path,
            format!("segment table covers {} values, header says {d}", layout.len()),
        ));
    }
    let raw = c.take(d.checked_mul(8).ok_or_else(|| Error::format(path, "d overflows"))?)?;
    if c.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after values"));
    }
    let values = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ParameterVector::new(values, Arc::new(layout))
}

pub fn save(params: &ParameterVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterVector> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterVector {
        let layout = Layout::from_shapes([
            ("conv0.weight", vec![2, 1, 3, 3]),
            ("conv0.bias", vec![2]),
            ("fc1.weight", vec![3, 2]),
        ]);
        let values = (0..layout.len()).map(|i| (i as f64).sin() * 1e-3).collect();
        ParameterVector::new(values, Arc::new(layout)).unwrap()
    }

    #[test]
    fn header_bytes() {
        let bytes = encode(&ParameterVector::from_vec(vec![1.5]));
        assert_eq!(&bytes[..4], b"FLTL");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let p = Path::new("mem");
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
        assert_eq!(decode(&bytes, p).unwrap(), sample());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fltl");
        save(&sample(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u64>(), 1..40)) {
            let values: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
            let p = ParameterVector::from_vec(values);
            let bytes = encode(&p);
            let q = decode(&bytes, Path::new("mem")).unwrap();
            let a: Vec<u64> = p.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(p.layout(), q.layout());
            prop_assert_eq!(encode(&q), bytes);
        }
    }
}
