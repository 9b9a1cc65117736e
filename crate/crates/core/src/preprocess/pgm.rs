//! Binary PGM (`P5`) reading and writing. `P6` colour files are accepted on
//! read and averaged down to one channel.

use std::fs;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

/// Serialize as `P5\n<w> <h>\n255\n` followed by raw bytes.
pub fn write_pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, write_pgm_bytes(img))?;
    Ok(())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
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

    fn number(&mut self) -> Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed header".to_string())
    }
}

fn parse(bytes: &[u8]) -> Result<GrayImage, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM file".into()),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number()?;
    let height = hdr.number()?;
    let maxval = hdr.number()?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(hdr.pos) {
        Some(c) if c.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err("missing raster separator".into()),
    }
    let need = width * height * channels;
    let raster = bytes.get(hdr.pos..hdr.pos + need).ok_or_else(|| {
        format!("truncated raster: need {need} bytes, have {}", bytes.len().saturating_sub(hdr.pos))
    })?;
    GrayImage::from_interleaved(height, width, channels, raster).map_err(|e| e.to_string())
}

pub fn read_pgm_bytes(bytes: &[u8]) -> Result<GrayImage, String> {
    parse(bytes)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::UnreadableImage { path: path.to_path_buf(), reason: e.to_string() })?;
    parse(&bytes).map_err(|reason| Error::UnreadableImage { path: path.to_path_buf(), reason })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_layout_is_exact() {
        let img = GrayImage::new(2, 3, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = write_pgm_bytes(&img);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], img.pixels());
        assert_eq!(read_pgm_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn header_comments_and_spacing() {
        let mut bytes = b"P5 # comment\n  2\t1 # more\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        assert_eq!(read_pgm_bytes(&bytes).unwrap().pixels(), &[7, 9]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut bytes = write_pgm_bytes(&GrayImage::filled(4, 4, 3).unwrap());
        bytes.truncate(bytes.len() - 1);
        assert!(read_pgm_bytes(&bytes).unwrap_err().contains("truncated"));
        assert!(read_pgm_bytes(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn ppm_is_averaged() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[30, 60, 90]);
        assert_eq!(read_pgm_bytes(&bytes).unwrap().pixels(), &[60]);
    }
}
