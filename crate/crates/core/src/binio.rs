//! Little-endian primitives shared by the checkpoint and corpus formats.

use crate::error::{FormatError, Result};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.buf.reserve(v.len() * 8);
        v.iter().for_each(|x| self.f64(*x));
    }

    /// `u32` length prefix, then UTF-8.
    pub fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// `u16` length prefix, then UTF-8.
    pub fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(FormatError::Truncated { what: what.to_string() }.into());
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        self.array(what).map(u16::from_le_bytes)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| malformed(what))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        utf8(self.take(n, what)?, what)
    }

    pub fn name(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        utf8(self.take(n, what)?, what)
    }

    /// Checks an 8-byte magic and a `u32` version.
    pub fn header(&mut self, magic: &[u8; 8], version: u32) -> Result<()> {
        let found = self.take(8, "magic")?;
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            }
            .into());
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(FormatError::Version { expected: version, found: v }.into());
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if !self.is_empty() {
            return Err(FormatError::Malformed(format!("{} trailing bytes", self.data.len() - self.pos)).into());
        }
        Ok(())
    }
}

fn utf8(b: &[u8], what: &str) -> Result<String> {
    String::from_utf8(b.to_vec()).map_err(|_| malformed(what).into())
}

pub(crate) fn malformed(what: &str) -> FormatError {
    FormatError::Malformed(format!("invalid {what}"))
}

/// Reads the 8-byte magic without consuming anything else.
pub(crate) fn peek_magic(data: &[u8]) -> Option<[u8; 8]> {
    data.get(..8).map(|m| m.try_into().expect("8 bytes"))
}
