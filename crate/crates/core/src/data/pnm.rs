//! Binary 8-bit portable graymaps (P5) and pixmaps (P6).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap};

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = header("P5", map.width(), map.height());
    out.extend_from_slice(map.data());
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height);
    out.extend_from_slice(&img.data);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Cursor<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: self.what.to_string(),
            offset,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, format!("expected {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.err(start, format!("{field} out of range")))
    }
}

/// Parses a header and returns `(width, height, raster)`.
fn parse<'a>(bytes: &'a [u8], magic: &[u8; 2], what: &'a str, channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let mut c = Cursor { bytes, pos: 0, what };
    match bytes.get(..2) {
        Some(m) if m == magic => {}
        Some(m) if m == b"P5" || m == b"P6" => {
            return Err(c.err(
                0,
                format!(
                    "found {}, expected {}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(magic)
                ),
            ))
        }
        _ => return Err(c.err(0, format!("missing {} magic", String::from_utf8_lossy(magic)))),
    }
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval_at = {
        c.skip_space();
        c.pos
    };
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(c.err(maxval_at, format!("maxval {maxval}, only 8-bit (255) is supported")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err(c.pos, "expected whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(c.err(2, format!("empty {width}×{height} raster")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| c.err(2, "raster size overflows"))?;
    let raster = &bytes[c.pos..];
    if raster.len() < need {
        return Err(c.err(
            bytes.len(),
            format!("raster truncated: {} of {need} bytes", raster.len()),
        ));
    }
    Ok((width, height, &raster[..need]))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, raster) = parse(bytes, b"P5", "graymap", 1)?;
    Grid::new(h, w, raster.to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, raster) = parse(bytes, b"P6", "pixmap", 3)?;
    Ok(RgbImage {
        height,
        width,
        data: raster.to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?).map_err(|e| e.in_file(path))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?).map_err(|e| e.in_file(path))
}

pub fn write_pgm(path: &Path, map: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
