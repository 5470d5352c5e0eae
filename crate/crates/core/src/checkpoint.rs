//! Binary parameter container.
//!
//! ```text
//! "PVIT"                      magic, 4 bytes
//! u32                         format version
//! u32 + bytes                 UTF-8 JSON header (model config)
//! repeated until EOF:
//!   u32 + bytes               parameter name
//!   u32                       rank
//!   u32 × rank                dims
//!   f32 × product(dims)       values
//! ```
//!
//! All integers and floats are little-endian. Values are computed in f64 and
//! stored as f32.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PVIT";
pub const VERSION: u32 = 1;

pub fn encode<'a>(header: &str, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, header.as_bytes());
    for (name, t) in tensors {
        put_bytes(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn write<'a>(path: &Path, header: &str, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let bytes = encode(header, tensors);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("invalid UTF-8 before byte {}", self.pos)))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Format("file too short for magic bytes".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}, expected \"PVIT\"")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header = r.string()?;
    let mut tensors = Vec::new();
    while !r.done() {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    Ok((header, tensors))
}

/// Reads a container; errors name the file.
pub fn read(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_quantizes_to_f32() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, 1e-9, 7.0, 0.333]).unwrap();
        let bytes = encode("{\"a\":1}", [("w", &t)]);
        let (h, ts) = decode(&bytes).unwrap();
        assert_eq!(h, "{\"a\":1}");
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].0, "w");
        assert_eq!(ts[0].1.shape(), &[2, 3]);
        for (a, b) in ts[0].1.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::zeros(vec![4]).unwrap();
        let mut bytes = encode("{}", [("w", &t)]);
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(short), Err(Error::Format(_))));
        bytes[0] = b'X';
        let msg = decode(&bytes).unwrap_err().to_string();
        assert!(msg.contains("magic"), "{msg}");
    }

    #[test]
    fn read_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.ckpt");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        let msg = read(&p).unwrap_err().to_string();
        assert!(msg.contains("broken.ckpt"), "{msg}");
    }
}
