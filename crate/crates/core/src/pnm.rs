//! Binary netpbm (P5 greyscale, P6 RGB) reading and writing.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Decode a P5/P6 buffer into `[0, 1]` values.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(parse_err(0, "missing netpbm magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(parse_err(1, "only binary P5/P6 are supported")),
    };
    let mut h = Header { bytes, pos: 2 };
    h.skip_space();
    let at = h.pos;
    let width = h.number("width")?;
    let height = h.number("height")?;
    if width == 0 || height == 0 {
        return Err(parse_err(at, "zero image dimension"));
    }
    h.skip_space();
    let at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(at, format!("maxval {maxval} outside 1..=65535")));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(parse_err(h.pos, "expected whitespace after maxval"));
    }
    let start = h.pos + 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels * bps))
        .ok_or_else(|| parse_err(at, "image too large"))?;
    if bytes.len() - start < need {
        return Err(parse_err(bytes.len(), format!("truncated raster: need {need} bytes")));
    }
    let raster = &bytes[start..start + need];
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(width * height * channels);
    for (i, chunk) in raster.chunks_exact(bps).enumerate() {
        let v = if bps == 1 {
            chunk[0] as usize
        } else {
            (chunk[0] as usize) << 8 | chunk[1] as usize
        };
        if v > maxval {
            return Err(parse_err(start + i * bps, format!("sample {v} exceeds maxval {maxval}")));
        }
        data.push(v as f64 / scale);
    }
    Image::from_vec(height, width, channels, data)
}

/// Encode with round-half-up quantization; values are clamped to `[0, 1]`.
pub fn encode_pnm(img: &Image, maxval: u16) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Data(format!("netpbm holds 1 or 3 channels, not {c}"))),
    };
    if maxval == 0 {
        return Err(Error::domain("maxval must be positive"));
    }
    img.ensure_finite()?;
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    let m = maxval as f64;
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * m + 0.5).floor() as u16;
        if maxval < 256 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&std::fs::read(path)?)
}

/// 8-bit output.
pub fn write_pnm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pnm(img, 255)?)?;
    Ok(())
}

/// Every `.ppm`/`.pgm`/`.pnm` file in `dir`, sorted by file name.
pub fn read_pnm_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, Image)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm" | "pgm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_pnm(&p).map(|img| (p, img)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_255_is_one() {
        let img = decode_pnm(b"P5 1 1 255\n\xff").unwrap();
        assert_eq!(img.data(), &[1.0]);
        let img = decode_pnm(b"P6\n# comment\n1 1\n65535\n\xff\xff\x00\x00\x80\x00").unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 0.0);
        assert_eq!(img.data()[2], 32768.0 / 65535.0);
    }

    #[test]
    fn malformed_headers() {
        for (bytes, off) in [
            (&b"P6 0 0 255\n"[..], 3),
            (b"P3 1 1 255\n0 0 0", 1),
            (b"Q6", 0),
            (b"P6 2 x", 5),
            (b"P6 1 1 70000\n", 7),
        ] {
            match decode_pnm(bytes) {
                Err(Error::Parse { offset, .. }) => assert_eq!(offset, off, "{:?}", std::str::from_utf8(bytes)),
                other => panic!("{other:?}"),
            }
        }
        match decode_pnm(b"P6 2 2 255\n\x00\x00") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_half_up_quantization() {
        let img = Image::from_vec(1, 4, 1, vec![0.5 / 255.0, 1.5 / 255.0, -0.2, 1.3]).unwrap();
        let bytes = encode_pnm(&img, 255).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[1, 2, 0, 255]);
        let wide = encode_pnm(&Image::filled(1, 1, 3, 1.0), 65535).unwrap();
        assert_eq!(&wide[wide.len() - 6..], &[0xff; 6]);
        assert!(encode_pnm(&Image::new(1, 1, 2), 255).is_err());
    }
}
