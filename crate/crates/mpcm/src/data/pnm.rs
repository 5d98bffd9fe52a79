//! Binary portable pixmaps: P6 for images, P5 for label maps.
//!
//! Codec-free storage keeps round trips bit-exact for labels and within
//! one 8-bit quantization step for images.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic at byte 0: expected `{expected}`")]
    BadMagic { expected: &'static str },

    #[error("malformed header at byte {offset}: {msg}")]
    Header { offset: usize, msg: String },

    #[error("pixel data truncated at byte {offset}: expected {expected} bytes, found {got}")]
    Truncated {
        offset: usize,
        expected: usize,
        got: usize,
    },
}

pub type PnmResult<T> = std::result::Result<T, PnmError>;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes planar `[3][h][w]` values in [0,1] as binary P6, maxval 255.
pub fn write_ppm(path: &Path, image: &[f32], h: usize, w: usize) -> PnmResult<()> {
    assert_eq!(image.len(), 3 * h * w, "planar 3xHxW image");
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(image[c * h * w + p]));
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary P6 file back to planar `[3][h][w]` values in [0,1].
pub fn read_ppm(path: &Path) -> PnmResult<(Vec<f32>, usize, usize)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    cur.expect_magic("P6")?;
    let w = cur.read_number("width")?;
    let h = cur.read_number("height")?;
    let maxval = cur.read_number("maxval")?;
    if maxval != 255 {
        return Err(PnmError::Header {
            offset: cur.pos,
            msg: format!("unsupported maxval {maxval}, expected 255"),
        });
    }
    cur.skip_single_whitespace()?;
    let need = 3 * w * h;
    let raw = cur.rest();
    if raw.len() < need {
        return Err(PnmError::Truncated {
            offset: cur.pos,
            expected: need,
            got: raw.len(),
        });
    }
    let mut image = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            image[c * h * w + p] = raw[p * 3 + c] as f32 / 255.0;
        }
    }
    Ok((image, h, w))
}

/// Writes label ids 0..=3 as binary P5 with maxval 3.
pub fn write_pgm(path: &Path, labels: &[u8], h: usize, w: usize) -> PnmResult<()> {
    assert_eq!(labels.len(), h * w);
    let mut bytes = format!("P5\n{w} {h}\n3\n").into_bytes();
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary P5 label map (any maxval up to 255; values returned raw).
pub fn read_pgm(path: &Path) -> PnmResult<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    cur.expect_magic("P5")?;
    let w = cur.read_number("width")?;
    let h = cur.read_number("height")?;
    let maxval = cur.read_number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(PnmError::Header {
            offset: cur.pos,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    cur.skip_single_whitespace()?;
    let raw = cur.rest();
    if raw.len() < h * w {
        return Err(PnmError::Truncated {
            offset: cur.pos,
            expected: h * w,
            got: raw.len(),
        });
    }
    Ok((raw[..h * w].to_vec(), h, w))
}

/// Byte-offset-tracking reader for the whitespace-separated header.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn expect_magic(&mut self, magic: &'static str) -> PnmResult<()> {
        if !self.bytes.starts_with(magic.as_bytes()) {
            return Err(PnmError::BadMagic { expected: magic });
        }
        self.pos = magic.len();
        Ok(())
    }

    fn read_number(&mut self, field: &str) -> PnmResult<usize> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::Header {
                offset: start,
                msg: format!("expected {field} digits"),
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse().map_err(|_| PnmError::Header {
            offset: start,
            msg: format!("{field} out of range"),
        })
    }

    fn skip_single_whitespace(&mut self) -> PnmResult<()> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(PnmError::Header {
                offset: self.pos,
                msg: "expected single whitespace before pixel data".into(),
            });
        }
        self.pos += 1;
        Ok(())
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("mpcm_pnm_{}_{name}", std::process::id()));
        p
    }

    #[test]
    fn label_round_trip_is_exact() {
        let path = tmp("labels.pgm");
        let labels: Vec<u8> = (0..24).map(|i| (i % 4) as u8).collect();
        write_pgm(&path, &labels, 4, 6).unwrap();
        let (back, h, w) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (4, 6));
        assert_eq!(back, labels);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn image_round_trip_stays_within_quantization() {
        let path = tmp("image.ppm");
        let mut rng = Rng::new(5);
        let image: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.next_f64() as f32).collect();
        write_ppm(&path, &image, 8, 8).unwrap();
        let (back, h, w) = read_ppm(&path).unwrap();
        assert_eq!((h, w), (8, 8));
        for (a, b) in image.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn hand_built_p6_bytes_decode_to_expected_pixels() {
        // 2x2 image assembled byte by byte from the format definition:
        // magic, width, height, maxval, then interleaved RGB rows
        let path = tmp("hand.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[
            255, 0, 0, /**/ 0, 255, 0, // red, green
            0, 0, 255, /**/ 255, 255, 255, // blue, white
        ]);
        std::fs::write(&path, &bytes).unwrap();
        let (img, h, w) = read_ppm(&path).unwrap();
        assert_eq!((h, w), (2, 2));
        let at = |c: usize, p: usize| img[c * 4 + p];
        assert_eq!((at(0, 0), at(1, 0), at(2, 0)), (1.0, 0.0, 0.0));
        assert_eq!((at(0, 1), at(1, 1), at(2, 1)), (0.0, 1.0, 0.0));
        assert_eq!((at(0, 2), at(1, 2), at(2, 2)), (0.0, 0.0, 1.0));
        assert_eq!((at(0, 3), at(1, 3), at(2, 3)), (1.0, 1.0, 1.0));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn malformed_magic_and_header_report_byte_offsets() {
        let path = tmp("bad.ppm");
        std::fs::write(&path, b"Q6\n2 2\n255\n").unwrap();
        match read_ppm(&path) {
            Err(PnmError::BadMagic { expected }) => assert_eq!(expected, "P6"),
            other => panic!("unexpected: {other:?}"),
        }
        std::fs::write(&path, b"P6\nxx").unwrap();
        match read_ppm(&path) {
            Err(PnmError::Header { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("unexpected: {other:?}"),
        }
        std::fs::write(&path, b"P6\n2 2\n255\n\xff\x00").unwrap();
        match read_ppm(&path) {
            Err(PnmError::Truncated { expected, got, .. }) => {
                assert_eq!(expected, 12);
                assert_eq!(got, 2);
            }
            other => panic!("unexpected: {other:?}"),
        }
        std::fs::remove_file(&path).ok();
    }
}
