//! Little-endian byte helpers shared by the binary file formats.

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    /// Appends the CRC32C of everything written so far.
    pub fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32c::crc32c(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(Error::Truncated(self.what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("take returns N bytes"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt(format!("invalid UTF-8 in {}", self.what)))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(Error::Corrupt(format!("{} trailing bytes in {}", self.remaining(), self.what)))
        }
    }
}

/// Splits the trailing CRC32C off `bytes` and verifies it.
pub(crate) fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
    let computed = crc32c::crc32c(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

/// Validates magic, version and framing of a sectioned container and returns
/// the section payloads. Framing is walked before the checksum so that a
/// short file reports truncation rather than a checksum mismatch.
pub(crate) fn open_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    magic_name: &'static str,
    version: u16,
    n_sections: usize,
) -> Result<Vec<&'a [u8]>> {
    let mut r = ByteReader::new(bytes, "header");
    if r.take(4)? != magic {
        return Err(Error::BadMagic { expected: magic_name });
    }
    let found = r.u16()?;
    if found != version {
        return Err(Error::VersionMismatch { found, expected: version });
    }
    let mut sections = Vec::with_capacity(n_sections);
    r.what = "section";
    for _ in 0..n_sections {
        let len = r.u64()?;
        let len = usize::try_from(len).map_err(|_| Error::Truncated("section"))?;
        sections.push(r.take(len)?);
    }
    match r.remaining() {
        0..=3 => return Err(Error::Truncated("checksum")),
        4 => {}
        n => return Err(Error::Corrupt(format!("{} unexpected trailing bytes", n - 4))),
    }
    verify_crc(bytes)?;
    Ok(sections)
}
