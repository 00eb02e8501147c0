//! Binary PPM (P6) image IO.
//!
//! P6 is the bit-exactness workhorse here: an ASCII header (`P6`, width,
//! height, maximum value) followed by raw interleaved RGB bytes. Tensors
//! hold channel-planar floats in `[0, 1]`; quantization rounds to the
//! nearest of 256 levels, so save→load→save reproduces files byte for
//! byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Byte-level reader tracking its offset for error reports.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { offset: self.pos as u64, message: message.into() })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(b) = self.peek() {
            match b {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.peek().is_some_and(|c| c != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        let start = self.pos;
        let mut value: u64 = 0;
        while let Some(b) = self.peek() {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(u64::from(b - b'0')))
                .ok_or(Error::Parse {
                    offset: start as u64,
                    message: format!("{what} overflows"),
                })?;
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail(format!("expected {what}"));
        }
        Ok(value)
    }
}

/// Parse a P6 image into a `[1, 3, H, W]` tensor with values in `[0, 1]`.
/// Malformed input fails with the byte offset of the offending field.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return c.fail("not a P6 image");
    }
    c.pos = 2;
    c.skip_separators();
    let w = c.number("width")? as usize;
    c.skip_separators();
    let h = c.number("height")? as usize;
    c.skip_separators();
    let maxval_at = c.pos;
    let maxval = c.number("maximum value")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at as u64,
            message: format!("only maximum value 255 is supported, got {maxval}"),
        });
    }
    match c.peek() {
        Some(b' ' | b'\t' | b'\r' | b'\n') => c.pos += 1,
        _ => return c.fail("expected single whitespace after maximum value"),
    }
    if w == 0 || h == 0 || w.saturating_mul(h) > 1 << 26 {
        return Err(Error::Parse {
            offset: 3,
            message: format!("unreasonable image extent {w}x{h}"),
        });
    }
    let need = w * h * 3;
    if bytes.len() - c.pos < need {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!("pixel data ends early: need {need} bytes, have {}", bytes.len() - c.pos),
        });
    }
    if bytes.len() - c.pos > need {
        return Err(Error::Parse {
            offset: (c.pos + need) as u64,
            message: "trailing bytes after pixel data".to_string(),
        });
    }
    let mut out = Tensor::zeros(vec![1, 3, h, w]);
    let plane = h * w;
    let data = out.data_mut();
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = f32::from(bytes[c.pos + 3 * p + ch]) / 255.0;
        }
    }
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serialize a `[1, 3, H, W]` tensor as canonical P6 bytes.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("P6 wants [1, 3, H, W], got {:?}", image.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(plane * 3);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(image.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn save_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_black_decodes_to_zeros() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([0u8; 12]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn four_color_2x2_round_trips_exactly() {
        let px = [[255u8, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 255]];
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        for p in px {
            bytes.extend(p);
        }
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&t).unwrap(), bytes);
        // Spot-check planar layout: pixel 1 is pure green.
        assert_eq!(t.data()[4 * 0 + 1], 0.0);
        assert_eq!(t.data()[4 * 1 + 1], 1.0);
        assert_eq!(t.data()[4 * 2 + 1], 0.0);
    }

    #[test]
    fn save_then_load_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| i as f32 / 59.0).collect();
        let img = Tensor::new(vec![1, 3, 4, 5], data).unwrap();
        save_ppm(&path, &img).unwrap();
        let first = std::fs::read(&path).unwrap();
        save_ppm(&path, &load_ppm(&path).unwrap()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n2 1 # extent\n255\n".to_vec();
        bytes.extend([7u8; 6]);
        assert_eq!(decode_ppm(&bytes).unwrap().shape(), &[1, 3, 1, 2]);
    }

    fn offset_of(err: Error) -> u64 {
        match err {
            Error::Parse { offset, .. } => offset,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_fails_at_offset_zero() {
        assert_eq!(offset_of(decode_ppm(b"P5\n1 1\n255\n\0").unwrap_err()), 0);
    }

    #[test]
    fn truncated_pixels_fail_at_end_of_data() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([0u8; 5]);
        let err = decode_ppm(&bytes).unwrap_err();
        assert_eq!(offset_of(err), bytes_len(&bytes));
    }

    fn bytes_len(b: &[u8]) -> u64 {
        b.len() as u64
    }

    #[test]
    fn wide_maxval_is_rejected_at_its_offset() {
        let err = decode_ppm(b"P6\n1 1\n65535\n\0\0\0").unwrap_err();
        assert_eq!(offset_of(err), 7);
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend([0u8; 4]);
        let err = decode_ppm(&bytes).unwrap_err();
        assert_eq!(offset_of(err), bytes.len() as u64 - 1);
    }

    #[test]
    fn quantization_is_nearest_level() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128); // 127.5 rounds away from zero
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.5), 255);
    }
}
