use std::path::Path;

use super::{ImageError, Raster, Result};

/// Encode as binary PGM (gray) or PPM (RGB) with a canonical
/// `P5\n<w> <h>\n255\n` header.
pub fn encode_pnm(img: &Raster) -> Vec<u8> {
    let magic = if img.is_gray() { "P5" } else { "P6" };
    let header = format!("{magic}\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.data());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Header(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| ImageError::Header(format!("non-ascii {what}")))
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| ImageError::Header(format!("bad {what} {tok:?}")))
    }
}

/// Decode a binary P5/P6 file with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token("magic")?;
    let channels = match magic {
        "P5" => 1,
        "P6" => 3,
        other => return Err(ImageError::Magic(other.to_string())),
    };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(ImageError::MaxVal(maxval));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(ImageError::Header("missing separator before body".into())),
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Header(format!("dimensions {width}x{height}")));
    }
    let expected = width * height * channels;
    let body = &bytes[cur.pos..];
    if body.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            got: body.len(),
        });
    }
    Raster::new(width, height, channels, body[..expected].to_vec())
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Raster> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &Raster) -> Result<()> {
    std::fs::write(path, encode_pnm(img))?;
    Ok(())
}
