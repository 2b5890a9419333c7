//! Binary Netpbm: `P6` (RGB) for images and `P5` (grey) for label maps.

use crate::error::FormatError;

/// 8-bit raster with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u8,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "grey raster size");
        Raster { width, height, channels: 1, maxval: 255, data }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "rgb raster size");
        Raster { width, height, channels: 3, maxval: 255, data }
    }
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", r.width, r.height, r.maxval).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Raster, FormatError> {
    decode(bytes, b"P6", 3)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Raster, FormatError> {
    decode(bytes, b"P5", 1)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments that run to end of line.
    fn skip_blank(&mut self) {
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

    fn number(&mut self, what: &'static str) -> Result<usize, FormatError> {
        self.skip_blank();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if self.pos >= self.bytes.len() {
                FormatError::Truncated { what, offset: self.pos }
            } else {
                FormatError::Malformed(format!("expected {what} at byte {start}"))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FormatError::Malformed(format!("{what} out of range")))
    }
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Raster, FormatError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(FormatError::BadMagic);
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(FormatError::Malformed(format!("empty raster {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(FormatError::Malformed(format!("maxval {maxval} not in 1..=255")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        Some(_) => return Err(FormatError::Malformed("no whitespace after maxval".into())),
        None => return Err(FormatError::Truncated { what: "header", offset: h.pos }),
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| FormatError::Malformed("raster too large".into()))?;
    let body = &bytes[h.pos..];
    if body.len() < len {
        return Err(FormatError::Truncated { what: "pixel data", offset: bytes.len() });
    }
    if body.len() > len {
        return Err(FormatError::Malformed(format!("{} trailing bytes", body.len() - len)));
    }
    if let Some(&v) = body.iter().find(|&&v| v as usize > maxval) {
        return Err(FormatError::Malformed(format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(Raster { width, height, channels, maxval: maxval as u8, data: body.to_vec() })
}
