//! Little-endian framing shared by the dataset and checkpoint files:
//! 4 magic bytes, a version byte, a body, and a CRC32 of the body.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len(&mut self, n: usize) {
        self.u32(n as u32);
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    /// Length-prefixed values.
    pub fn vec(&mut self, vs: &[f64]) {
        self.len(vs.len());
        self.f64s(vs);
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.len(s.len());
        self.bytes(s.as_bytes());
    }

    /// `magic ‖ version ‖ body ‖ crc32(body)`.
    pub fn finish(self, magic: &[u8; 4], version: u8) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.buf.len() + 9);
        out.extend_from_slice(magic);
        out.push(version);
        out.extend_from_slice(&self.buf);
        out.extend_from_slice(&crc32fast::hash(&self.buf).to_le_bytes());
        out
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    pub fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        self.f64s(n)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("string is not utf-8".into()))
    }

    fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Validates the envelope and decodes the body with `parse`.
///
/// A body that parses to completion but fails its checksum is reported as
/// [`Error::ChecksumMismatch`]; one that ends early as [`Error::Truncated`].
pub(crate) fn decode<T>(
    bytes: &[u8],
    magic: &[u8; 4],
    version: u8,
    parse: impl Fn(&mut Reader<'_>) -> Result<T>,
) -> Result<T> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic { expected: *magic });
    }
    let found = *bytes.get(4).ok_or(Error::Truncated)?;
    if found != version {
        return Err(Error::VersionMismatch {
            found,
            expected: version,
        });
    }
    if bytes.len() < 9 {
        return Err(Error::Truncated);
    }
    let (body, tail) = bytes[5..].split_at(bytes.len() - 9);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        // a short file leaves the parser without enough bytes even when the
        // trailer is counted as body
        let mut probe = Reader {
            buf: &bytes[5..],
            pos: 0,
        };
        if let Err(Error::Truncated) = parse(&mut probe) {
            return Err(Error::Truncated);
        }
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut reader = Reader { buf: body, pos: 0 };
    let value = parse(&mut reader)?;
    if !reader.finished() {
        return Err(Error::Format("trailing bytes after body".into()));
    }
    Ok(value)
}
