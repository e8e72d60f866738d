//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit pixel grid, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("degenerate image {width}×{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{width}×{height}×{channels} image needs {} bytes, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(RawImage { width, height, channels, pixels })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("expected {what} at byte offset {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| Error::Format(format!("{what} at byte offset {start}: {e}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<RawImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("bad magic: expected P5 or P6".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("maxval {maxval} is not an 8-bit range")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("degenerate image {width}×{height}")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::Format(format!("expected whitespace after header at byte offset {}", h.pos))),
    }
    let need = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "truncated payload at byte offset {}: expected {need} bytes from offset {}",
            bytes.len(),
            h.pos
        )));
    }
    RawImage::new(width, height, channels, payload[..need].to_vec())
}

pub fn encode_pnm(img: &RawImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pnm(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path)?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pnm(path: &Path, img: &RawImage) -> Result<()> {
    fs::write(path, encode_pnm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn decodes_small_ppm_exactly() {
        let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
        let px: Vec<u8> = (0..12).map(|i| i * 20).collect();
        bytes.extend_from_slice(&px);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        assert_eq!(img.pixels, px);
        assert_eq!(img.get(1, 0, 2), 160);
    }

    #[test]
    fn decodes_pgm_as_one_channel() {
        let img = decode_pnm(b"P5 3 1 255 \x00\x7f\xff").unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 1, 1));
        assert_eq!(img.pixels, vec![0, 127, 255]);
    }

    #[test]
    fn rejects_bad_magic_and_wide_samples() {
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P5\n0 1\n255\n"), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let err = decode_pnm(b"P5\n4 4\n255\n\x01\x02\x03").unwrap_err().to_string();
        assert!(err.contains("byte offset 14"), "{err}");
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u8>()) {
            let c = if rgb { 3 } else { 1 };
            let px: Vec<u8> = (0..w * h * c).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = RawImage::new(w, h, c, px).unwrap();
            prop_assert_eq!(decode_pnm(&encode_pnm(&img)).unwrap(), img);
        }
    }
}
