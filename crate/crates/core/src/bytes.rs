//! Little-endian reading and writing for the binary containers.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported version {version} at byte {offset}")]
    Version { version: u16, offset: usize },
    #[error("truncated input at byte {offset}: needed {needed} more bytes while reading {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: String,
    },
    #[error("invalid field at byte {offset}: {message}")]
    Invalid { offset: usize, message: String },
    #[error("{} trailing bytes after byte {offset}", .len)]
    Trailing { offset: usize, len: usize },
}

#[derive(Debug, Default, Clone)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    /// `u16` length prefix followed by UTF-8 bytes.
    pub fn name(&mut self, s: &str) -> &mut Self {
        debug_assert!(s.len() <= u16::MAX as usize);
        self.u16(s.len() as u16).bytes(s.as_bytes())
    }

    pub fn scalars<S: Scalar>(&mut self, values: &[S]) -> &mut Self {
        self.buf.reserve(values.len() * S::DTYPE.size());
        for &v in values {
            v.write_le(&mut self.buf);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice that reports the offset of every failure.
#[derive(Debug, Clone)]
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
                what: what.to_string(),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: *expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub fn name(&mut self, what: &str) -> Result<String, FormatError> {
        let len = self.u16(what)? as usize;
        let start = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Invalid {
            offset: start,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    pub fn scalars<S: Scalar>(&mut self, count: usize, what: &str) -> Result<Vec<S>, FormatError> {
        let size = S::DTYPE.size();
        let nbytes = count.checked_mul(size).ok_or_else(|| FormatError::Invalid {
            offset: self.pos,
            message: format!("{what}: element count overflows"),
        })?;
        let raw = self.take(nbytes, what)?;
        Ok(raw.chunks_exact(size).map(S::read_le).collect())
    }

    pub fn invalid(&self, message: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            offset: self.pos,
            message: message.into(),
        }
    }

    pub fn expect_end(&self) -> Result<(), FormatError> {
        if self.remaining() != 0 {
            return Err(FormatError::Trailing {
                offset: self.pos,
                len: self.remaining(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let mut w = ByteWriter::new();
        w.u16(7).u8(1);
        let bytes = w.finish();
        let mut r = ByteReader::new(&bytes);
        assert_eq!(r.u16("a").unwrap(), 7);
        let err = r.u32("count").unwrap_err();
        assert_eq!(
            err,
            FormatError::Truncated {
                offset: 2,
                needed: 3,
                what: "count".into()
            }
        );
    }

    #[test]
    fn names_round_trip() {
        let mut w = ByteWriter::new();
        w.name("layer0.attn.wq").u64(u64::MAX);
        let bytes = w.finish();
        let mut r = ByteReader::new(&bytes);
        assert_eq!(r.name("name").unwrap(), "layer0.attn.wq");
        assert_eq!(r.u64("x").unwrap(), u64::MAX);
        r.expect_end().unwrap();
    }
}
