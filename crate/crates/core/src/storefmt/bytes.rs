//! Little-endian encoding helpers shared by the binary formats.

use crate::error::{Error, Result};

/// Cursor over an in-memory file image. Every read is bounds-checked
/// before allocating, so corrupt length fields fail cleanly.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {left} remain"),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4], kind: &str) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "not a {kind} file: magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn version(&mut self, kind: &'static str, supported: u32) -> Result<()> {
        let found = self.u32("version")?;
        if found != supported {
            return Err(Error::UnsupportedVersion {
                kind,
                found,
                supported,
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// `n` finite `f32` values widened to `f64`.
    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.offset();
        let bytes = self.take(byte_len(n, 4, start, what)?, what)?;
        decode_f32s(bytes, start, what)
    }

    /// `n` finite `f64` values.
    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.offset();
        let bytes = self.take(byte_len(n, 8, start, what)?, what)?;
        bytes
            .chunks_exact(8)
            .enumerate()
            .map(|(i, c)| {
                let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
                finite(v, start + 8 * i as u64, what)
            })
            .collect()
    }

    pub fn u64s(&mut self, n: usize, what: &str) -> Result<Vec<u64>> {
        let start = self.offset();
        let bytes = self.take(byte_len(n, 8, start, what)?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// Fails if unread bytes remain.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} unexpected trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn byte_len(n: usize, width: usize, offset: u64, what: &str) -> Result<usize> {
    n.checked_mul(width)
        .ok_or_else(|| Error::format(offset, format!("{what}: declared size overflows")))
}

fn finite(v: f64, offset: u64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::format(offset, format!("non-finite value in {what}")))
    }
}

pub(crate) fn decode_f32s(bytes: &[u8], start: u64, what: &str) -> Result<Vec<f64>> {
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
            finite(v, start + 4 * i as u64, what)
        })
        .collect()
}

/// Growable little-endian output buffer.
#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
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

    pub fn f32s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.bytes(&(v as f32).to_le_bytes());
        }
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn u64s(&mut self, vs: &[u64]) {
        for &v in vs {
            self.u64(v);
        }
    }
}

/// Rejects values that are non-finite or overflow `f32`.
pub(crate) fn check_f32_representable(vs: &[f64], what: &str) -> Result<()> {
    match vs.iter().position(|v| !(*v as f32).is_finite()) {
        Some(i) => Err(Error::Numeric(format!(
            "{what}: entry {i} ({}) is not representable as a finite f32",
            vs[i]
        ))),
        None => Ok(()),
    }
}

/// Narrow `u32` header field to `usize`, rejecting zero when required.
pub(crate) fn dim_field(v: u32, offset: u64, what: &str, allow_zero: bool) -> Result<usize> {
    if v == 0 && !allow_zero {
        return Err(Error::format(offset, format!("{what} must be positive")));
    }
    Ok(v as usize)
}

pub(crate) fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} does not fit the format")))
}
