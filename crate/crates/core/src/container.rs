//! Shared framing for the on-disk formats.
//!
//! Every file is `magic (4 bytes) | version u16 LE | header length u32 LE |
//! UTF-8 JSON header | payload`. The payload layout is format specific.

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{ParseError, Result};

pub(crate) fn write_frame<H: Serialize>(
    out: &mut Vec<u8>,
    magic: &[u8; 4],
    version: u16,
    header: &H,
) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(())
}

/// Size in bytes of the framing plus a given header.
pub(crate) fn frame_len<H: Serialize>(header: &H) -> Result<usize> {
    Ok(4 + 2 + 4 + serde_json::to_vec(header)?.len())
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ParseError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(ParseError::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16, ParseError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, ParseError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f64s(&mut self, count: usize, what: &'static str) -> Result<Vec<f64>, ParseError> {
        let bytes = count.checked_mul(8).ok_or(ParseError::Truncated {
            what,
            needed: usize::MAX,
            available: self.remaining(),
        })?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(self) -> Result<(), ParseError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(ParseError::TrailingBytes(n)),
        }
    }
}

/// Reads and checks the magic, version and JSON header.
pub(crate) fn read_frame<'a, H: DeserializeOwned>(
    buf: &'a [u8],
    magic: &[u8; 4],
    version: u16,
) -> Result<(H, Cursor<'a>), ParseError> {
    let mut cur = Cursor::new(buf);
    let found: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if &found != magic {
        return Err(ParseError::BadMagic {
            expected: *magic,
            found,
        });
    }
    let v = cur.u16("version")?;
    if v != version {
        return Err(ParseError::UnsupportedVersion {
            found: v,
            supported: version,
        });
    }
    let len = cur.u32("header length")? as usize;
    let raw = cur.take(len, "header")?;
    let header = serde_json::from_slice(raw).map_err(|e| ParseError::Header(e.to_string()))?;
    Ok((header, cur))
}
