//! Raster images and the binary netpbm formats used on disk.

use std::path::Path;

use crate::error::{Error, Result};

/// An RGB raster, 8 bits per channel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ViewImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "expected {} bytes for a {width}x{height} RGB image, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// A uniformly filled image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Encodes as binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        encode_netpbm("P6", self.width, self.height, &self.pixels)
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, body) = decode_netpbm(bytes)?;
        if magic != "P6" {
            return Err(Error::Shape(format!("expected P6 image, found {magic}")));
        }
        Self::new(width, height, body.to_vec())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_ppm(&bytes).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Encodes a single-channel 8-bit map as binary PGM (`P5`).
pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    debug_assert_eq!(values.len(), width * height);
    encode_netpbm("P5", width, height, values)
}

/// Decodes a binary PGM, returning `(width, height, values)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (magic, width, height, body) = decode_netpbm(bytes)?;
    if magic != "P5" {
        return Err(Error::Shape(format!("expected P5 image, found {magic}")));
    }
    if body.len() != width * height {
        return Err(Error::Shape(format!(
            "expected {} bytes of P5 data, got {}",
            width * height,
            body.len()
        )));
    }
    Ok((width, height, body.to_vec()))
}

fn encode_netpbm(magic: &str, width: usize, height: usize, body: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(body);
    out
}

fn decode_netpbm(bytes: &[u8]) -> Result<(String, usize, usize, &[u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        // whitespace and comments between header tokens
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Shape("truncated netpbm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Shape(format!("bad netpbm header field `{s}`")))
    };
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    if parse(&fields[3])? != 255 {
        return Err(Error::Shape(format!(
            "only maxval 255 is supported, found {}",
            fields[3]
        )));
    }
    let channels = if fields[0] == "P6" { 3 } else { 1 };
    let expected = width * height * channels;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != expected {
        return Err(Error::Shape(format!(
            "expected {expected} bytes of raster data, got {}",
            body.len()
        )));
    }
    Ok((fields.swap_remove(0), width, height, body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_is_exact() {
        let img = ViewImage::filled(2, 1, [1, 2, 3]).unwrap();
        let bytes = img.to_ppm();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[1, 2, 3, 1, 2, 3]);
        assert_eq!(ViewImage::from_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn rejects_wrong_pixel_count() {
        assert!(ViewImage::new(2, 2, vec![0; 11]).is_err());
        assert!(ViewImage::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn pgm_roundtrip_with_comment() {
        let mut bytes = b"P5\n# heat\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255]);
        let (w, h, v) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h, v), (3, 1, vec![0, 128, 255]));
        assert_eq!(
            decode_pgm(&encode_pgm(3, 1, &[0, 128, 255])).unwrap().2,
            vec![0, 128, 255]
        );
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let mut bytes = ViewImage::filled(2, 2, [9, 9, 9]).unwrap().to_ppm();
        bytes.pop();
        assert!(ViewImage::from_ppm(&bytes).is_err());
    }
}
