//! Binary container for named f32 tensors (model checkpoints and cached
//! target features).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "TDIDCKPT"
//! version u32
//! record* name_len u32, name (UTF-8), rank u64, extent u64 * rank,
//!         f32 * product(extents)
//! ```
//!
//! Records repeat until end of file. Values round-trip bit-for-bit: the
//! same tensors always serialize to identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"TDIDCKPT";
pub const VERSION: u32 = 1;

/// Longest record name accepted when reading; guards against parsing
/// garbage lengths out of corrupt files.
const MAX_NAME_LEN: u32 = 4096;
/// Highest tensor rank accepted when reading.
const MAX_RANK: u64 = 16;

pub fn write<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
{
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Parser<R: Read> {
    reader: R,
    offset: u64,
}

impl<R: Read> Parser<R> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.offset,
            message: message.into(),
        }
    }

    /// Read exactly `buf.len()` bytes. `at_boundary` permits a clean end of
    /// file before the first byte, reported as `Ok(false)`.
    fn fill(&mut self, buf: &mut [u8], at_boundary: bool) -> Result<bool> {
        let mut got = 0;
        while got < buf.len() {
            let n = self.reader.read(&mut buf[got..])?;
            if n == 0 {
                if got == 0 && at_boundary {
                    return Ok(false);
                }
                return Err(self.fail(format!(
                    "unexpected end of file ({got} of {} bytes read)",
                    buf.len()
                )));
            }
            got += n;
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, false)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, false)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut p = Parser {
        reader: BufReader::new(file),
        offset: 0,
    };

    let mut magic = [0u8; 8];
    if !p.fill(&mut magic, true)? || magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = p.u32()?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 8,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }

    let mut entries = Vec::new();
    loop {
        let mut len_bytes = [0u8; 4];
        if !p.fill(&mut len_bytes, true)? {
            return Ok(entries);
        }
        let name_len = u32::from_le_bytes(len_bytes);
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(p.fail(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        p.fill(&mut name_bytes, false)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| p.fail(format!("record name is not UTF-8: {e}")))?;

        let rank = p.u64()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(p.fail(format!("implausible rank {rank} for {name:?}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = p.u64()?;
            numel = numel
                .checked_mul(e)
                .filter(|&n| n.checked_mul(4).is_some_and(|bytes| bytes <= file_len))
                .ok_or_else(|| p.fail(format!("extents of {name:?} exceed file size")))?;
            shape.push(e as usize);
        }

        let mut data = vec![0f32; numel as usize];
        let mut b = [0u8; 4];
        for v in &mut data {
            p.fill(&mut b, false)?;
            *v = f32::from_le_bytes(b);
        }
        entries.push((name, Tensor::new(shape, data).map_err(|e| p.fail(e.to_string()))?));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(entries: &[(&str, Tensor<f32>)]) -> Vec<(String, Tensor<f32>)> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        write(&path, entries.iter().map(|(n, t)| (*n, t))).unwrap();
        read(&path).unwrap()
    }

    #[test]
    fn roundtrip_preserves_names_shapes_and_bits() {
        let t1 = Tensor::new(vec![2, 3], vec![1.0, -0.0, 1.5e-40, f32::MAX, -2.5, 0.1]).unwrap();
        let t2 = Tensor::new(vec![1], vec![42.0]).unwrap();
        let got = roundtrip(&[("backbone.0.weight", t1.clone()), ("head.bias", t2.clone())]);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].0, "backbone.0.weight");
        assert_eq!(got[0].1.shape(), t1.shape());
        for (a, b) in got[0].1.data().iter().zip(t1.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(got[1].0, "head.bias");
        assert_eq!(got[1].1.data(), t2.data());
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![4], vec![0.25, -1.0, 3.5, 1e-30]).unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        write(&a, [("w", &t)]).unwrap();
        write(&b, [("w", &t)]).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let t = Tensor::new(vec![8], vec![1.0; 8]).unwrap();
        write(&path, [("w", &t)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        std::fs::write(&path, b"NOTACKPT\x01\x00\x00\x00").unwrap();
        assert!(matches!(read(&path), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn oversized_extents_rejected_without_allocating() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'w');
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn empty_container_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        write(&path, std::iter::empty()).unwrap();
        assert!(read(&path).unwrap().is_empty());
    }
}
