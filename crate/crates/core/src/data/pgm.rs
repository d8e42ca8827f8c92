//! Netpbm grayscale input (P2/P5) and binary PGM/PPM output.

use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl GrayImage {
    pub fn to_tensor(&self) -> Tensor {
        let m = self.maxval as f64;
        Tensor {
            shape: (1, self.height, self.width),
            data: self.pixels.iter().map(|&p| p as f64 / m).collect(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Netpbm(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
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

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| bad(format!("{what} out of range")))
    }
}

pub fn read_pgm_image(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'2' || bytes[1] == b'5') {
        return Err(bad("not a P2/P5 graymap"));
    }
    let plain = bytes[1] == b'2';
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")? as usize;
    let height = hdr.number("height")? as usize;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} outside 1..=65535")));
    }
    let n = width * height;
    let mut pixels = Vec::with_capacity(n);
    if plain {
        for i in 0..n {
            let v = hdr
                .number("sample")
                .map_err(|_| bad(format!("truncated raster: {i} of {n} samples")))?;
            if v > maxval {
                return Err(bad(format!("sample {v} exceeds maxval {maxval}")));
            }
            pixels.push(v as u16);
        }
    } else {
        // exactly one whitespace byte separates header and raster
        if hdr.pos >= bytes.len() || !bytes[hdr.pos].is_ascii_whitespace() {
            return Err(bad("truncated header"));
        }
        let raster = &bytes[hdr.pos + 1..];
        let depth = if maxval < 256 { 1 } else { 2 };
        if raster.len() < n * depth {
            return Err(bad(format!(
                "truncated raster: {} of {} bytes",
                raster.len(),
                n * depth
            )));
        }
        for i in 0..n {
            let v = if depth == 1 {
                raster[i] as u32
            } else {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
            };
            if v > maxval {
                return Err(bad(format!("sample {v} exceeds maxval {maxval}")));
            }
            pixels.push(v as u16);
        }
    }
    Ok(GrayImage {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

/// Grayscale tensor with values scaled to [0, 1].
pub fn read_pgm(bytes: &[u8]) -> Result<Tensor> {
    Ok(read_pgm_image(bytes)?.to_tensor())
}

pub fn write_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for p in rgb {
        out.extend_from_slice(p);
    }
    out
}
