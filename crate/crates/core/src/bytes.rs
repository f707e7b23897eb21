//! Offset-tracking little-endian byte reader shared by the binary file
//! formats; every failure reports the offset it happened at.

use crate::error::{Error, Result};

pub(crate) struct ByteReader {
    pub buf: Vec<u8>,
    pub off: usize,
}

impl ByteReader {
    pub fn new(buf: Vec<u8>) -> Self {
        ByteReader { buf, off: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.off as u64,
                reason: format!("truncated while reading {what} ({n} bytes wanted)"),
            });
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("len 2")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("len 4")))
    }

    pub fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let off = self.off as u64;
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| Error::Format {
            offset: off,
            reason: format!("{what} is not valid utf-8"),
        })
    }

    /// Error unless the whole buffer was consumed.
    pub fn finish(&self) -> Result<()> {
        if self.off != self.buf.len() {
            return Err(Error::Format {
                offset: self.off as u64,
                reason: format!("{} trailing bytes", self.buf.len() - self.off),
            });
        }
        Ok(())
    }
}
