//! Little-endian byte reading shared by the binary file formats.

use crate::error::{Error, Result};

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated: wanted {n} more bytes"),
            }),
        }
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(
            self.take(16)?.try_into().expect("16 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// A u64 length that must fit in what is left of the input.
    pub fn len(&mut self, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        let fits = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(unit))
            .is_some_and(|bytes| bytes <= self.remaining());
        if !fits {
            return Err(Error::Format {
                offset: at as u64,
                detail: format!("length {n} runs past the end of the input"),
            });
        }
        Ok(n as usize)
    }

    pub fn str(&mut self) -> Result<&'a str> {
        let n = self.len(1)?;
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format {
            offset: at as u64,
            detail: "invalid utf-8".into(),
        })
    }
}

/// Appends length-prefixed strings and little-endian numbers.
pub(crate) trait PutBytes {
    fn put_u64(&mut self, v: u64);
    fn put_f64s(&mut self, v: &[f64]);
    fn put_str(&mut self, s: &str);
}

impl PutBytes for Vec<u8> {
    fn put_u64(&mut self, v: u64) {
        self.extend(v.to_le_bytes());
    }

    fn put_f64s(&mut self, v: &[f64]) {
        self.reserve(v.len() * 8);
        for x in v {
            self.extend(x.to_le_bytes());
        }
    }

    fn put_str(&mut self, s: &str) {
        self.put_u64(s.len() as u64);
        self.extend(s.as_bytes());
    }
}
