//! Binary netpbm frames: P6 (RGB) and P5 (grey), 8-bit, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "netpbm header",
        offset,
        detail: detail.into(),
    }
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
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
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
            return Err(format_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| format_err(start, format!("{what} out of range")))
    }
}

/// Decodes P6 into `[3,H,W]` or P5 into `[1,H,W]`, mapping byte `v` to `v/255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(format_err(0, "missing P5/P6 magic"));
    }
    let channels = match bytes[1] {
        b'6' => 3,
        b'5' => 1,
        _ => return Err(format_err(1, "only binary P5/P6 are supported")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(format_err(maxval_at, format!("maxval {maxval}, only 255 supported")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(2, "zero image dimension"));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(format_err(cur.pos, "expected single whitespace after maxval"));
    }
    let start = cur.pos + 1;
    let n = width * height * channels;
    if bytes.len() < start + n {
        return Err(format_err(
            bytes.len(),
            format!("payload truncated: {} of {n} bytes", bytes.len() - start),
        ));
    }
    let payload = &bytes[start..start + n];
    let plane = width * height;
    let mut data = vec![0.0f32; n];
    for (p, px) in payload.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + p] = v as f32 / 255.0;
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

/// `round(clamp(x, 0, 1) * 255)`, halves rounded up.
pub fn to_byte(x: f32) -> u8 {
    let v = (x.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor();
    v.min(255.0) as u8
}

/// Encodes `[3,H,W]` as P6 or `[1,H,W]` as P5.
pub fn encode_pnm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    t.expect_rank("encode_pnm", 3)?;
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let magic = match c {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::shape("encode_pnm", format!("channel count {c} must be 1 or 3"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(plane * c);
    for p in 0..plane {
        for ch in 0..c {
            out.push(to_byte(t.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn write_ppm(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(t)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn red_pixel() {
        let t = decode_pnm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(-3.0), 0);
        assert_eq!(to_byte(7.0), 255);
    }

    #[test]
    fn comments_are_skipped() {
        let t = decode_pnm(b"P5 # grey\n2 # w\n1\n255\n\x00\x80").unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
    }

    #[test]
    fn errors_carry_offsets() {
        let err = decode_pnm(b"P6\n2 2\n255\n\x00\x00").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 13),
            e => panic!("{e}"),
        }
        assert!(decode_pnm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_pnm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(decode_pnm(b"P6\nx 1\n255\n").is_err());
    }

    proptest! {
        #[test]
        fn write_read_is_byte_exact(w in 1usize..6, h in 1usize..6, grey in any::<bool>(), seed in any::<u64>()) {
            let c = if grey { 1 } else { 3 };
            let magic = if grey { "P5" } else { "P6" };
            let mut file = format!("{magic}\n{w} {h}\n255\n").into_bytes();
            file.extend((0..w * h * c).map(|i| (seed.rotate_left(i as u32 % 64) ^ i as u64) as u8));
            let t = decode_pnm(&file).unwrap();
            prop_assert_eq!(encode_pnm(&t).unwrap(), file);
        }
    }
}
