//! On-disk binary containers.
//!
//! Both file formats in this crate (datasets, checkpoints) follow the same
//! discipline: an 8-byte magic, little-endian fixed-width primitives, and
//! strict parsing — every violation is reported with the byte offset at
//! which it was detected, and trailing bytes are an error.

pub mod checkpoint;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Cursor over an in-memory file image with offset-tracked errors.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: impl Into<PathBuf>) -> Self {
        ByteReader {
            buf,
            pos: 0,
            path: path.into(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::parse(&self.path, self.pos as u64, detail)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "need {n} bytes, only {} remain",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Consume and verify an 8-byte magic.
    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let start = self.pos;
        let got = self.take(8)?;
        if got != magic {
            self.pos = start;
            return Err(self.err(format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn read_f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn read_f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::parse(&self.path, self.pos as u64, "element count overflows")
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read_u32_vec(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::parse(&self.path, self.pos as u64, "element count overflows")
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Length-prefixed UTF-8 string (u32 length).
    pub fn read_string(&mut self) -> Result<String> {
        let n = self.read_u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| self.err(format!("invalid UTF-8: {e}")))
    }

    /// Require that the whole buffer was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!(
                "{} trailing bytes after the final field",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Append-only builder for the binary containers.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn write_magic(&mut self, magic: &[u8; 8]) {
        self.buf.extend_from_slice(magic);
    }

    pub fn write_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn write_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn write_f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn write_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn write_f32_slice(&mut self, v: &[f32]) {
        for &x in v {
            self.write_f32(x);
        }
    }

    pub fn write_u32_slice(&mut self, v: &[u32]) {
        for &x in v {
            self.write_u32(x);
        }
    }

    pub fn write_string(&mut self, s: &str) {
        self.write_u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Read a whole file, mapping IO failures to the offending path.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write a whole file, mapping IO failures to the offending path.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
