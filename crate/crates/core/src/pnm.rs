//! Binary PGM (P5) and PPM (P6) codecs, 8-bit only.
//!
//! Header tokens may be separated by any whitespace and by `#` comments that
//! run to the end of the line. Exactly one whitespace byte separates the
//! maxval from the raster.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM (interleaved RGB).
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Pnm {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 1, data)
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 3, data)
    }

    fn checked(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} raster needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Pnm { width, height, channels, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut p = HeaderParser { bytes, pos: 0 };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(parse_err(0, "expected magic P5 or P6")),
        };
        p.pos = 2;
        let width = p.number("width")?;
        let height = p.number("height")?;
        let maxval = p.number("maxval")?;
        if maxval != 255 {
            return Err(parse_err(p.pos, format!("only maxval 255 is supported, found {maxval}")));
        }
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => return Err(parse_err(p.pos, "expected a single whitespace byte before the raster")),
        }
        let need = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| parse_err(p.pos, "image dimensions overflow"))?;
        let raster = &bytes[p.pos..];
        if raster.len() < need {
            return Err(parse_err(
                bytes.len(),
                format!("truncated raster: expected {need} bytes, found {}", raster.len()),
            ));
        }
        Ok(Pnm { width, height, channels, data: raster[..need].to_vec() })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { offset, msg: msg.into() }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderParser<'_> {
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_separators();
        if self.pos == before {
            return Err(parse_err(self.pos, format!("expected whitespace before {what}")));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected decimal {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}
