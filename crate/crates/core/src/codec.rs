//! Little-endian primitives shared by the binary formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{FormatError, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> std::result::Result<(), FormatError> {
        let found = self.u32()?;
        if found != expected {
            return Err(FormatError::VersionMismatch { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// A `u32` dimension field that must be at least `min`.
    pub(crate) fn dim(&mut self, name: &str, min: u32) -> std::result::Result<usize, FormatError> {
        let v = self.u32()?;
        if v < min {
            return Err(FormatError::Header(format!("{name} = {v}, must be >= {min}")));
        }
        Ok(v as usize)
    }

    /// Reads `n` 32-bit reals, widening to `f64`. `offset` is the index of the
    /// first element within the file's payload, for error reporting.
    pub(crate) fn f32s(&mut self, n: usize, offset: usize) -> std::result::Result<Vec<f64>, FormatError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Header("payload size overflows".into()))?;
        let raw = self.take(bytes)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, b)| {
                let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(FormatError::NonFinite(offset + i))
                }
            })
            .collect()
    }

    pub(crate) fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, FormatError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| FormatError::Header("payload size overflows".into()))?;
        let raw = self.take(bytes)?;
        raw.chunks_exact(8)
            .enumerate()
            .map(|(i, b)| {
                let v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FormatError::NonFinite(i))
                }
            })
            .collect()
    }

    pub(crate) fn finish(&self) -> std::result::Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    pub(crate) fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32s(&mut self, vals: &[f64]) {
        for &v in vals {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub(crate) fn f64s(&mut self, vals: &[f64]) {
        for &v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub(crate) fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

/// Rounds to the nearest `f32`, the precision of every on-disk tensor.
pub fn quantize_f32(v: f64) -> f64 {
    f64::from(v as f32)
}
