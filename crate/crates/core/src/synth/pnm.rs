//! Binary PPM (P6) and PGM (P5) images.
//!
//! 16-bit PGM samples are big-endian, as the format requires.

use std::path::Path;

use crate::error::{Error, Result};

/// Encodes an interleaved RGB image with values in `[0,1]`.
pub fn encode_ppm(width: usize, height: usize, rgb: &[f64]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_pgm8(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

pub fn encode_pgm16(width: usize, height: usize, values: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |msg: &str| Error::Data(format!("malformed PNM header: {msg}"));
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("missing magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected a number"))?;
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(bad("missing separator before pixel data"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

fn samples(bytes: &[u8], h: &Header, count: usize) -> Result<Vec<u16>> {
    let data = &bytes[h.data_start..];
    let wide = h.maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    if data.len() < need {
        return Err(Error::Data(format!("PNM payload has {} bytes, expected {need}", data.len())));
    }
    Ok(if wide {
        data[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data[..need].iter().map(|&b| b as u16).collect()
    })
}

/// Decodes a P6 image to interleaved RGB in `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Data("expected a P6 image".into()));
    }
    let s = samples(bytes, &h, h.width * h.height * 3)?;
    let max = h.maxval as f64;
    Ok((h.width, h.height, s.into_iter().map(|v| v as f64 / max).collect()))
}

/// Decodes a P5 image to raw samples (8- or 16-bit).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Data("expected a P5 image".into()));
    }
    let s = samples(bytes, &h, h.width * h.height)?;
    Ok((h.width, h.height, s))
}

pub fn write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_on_the_byte_grid() {
        let rgb: Vec<f64> = (0..12).map(|k| (k * 20) as f64 / 255.0).collect();
        let (w, h, back) = decode_ppm(&encode_ppm(2, 2, &rgb)).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(back, rgb);
    }

    #[test]
    fn pgm16_is_big_endian() {
        let bytes = encode_pgm16(2, 1, &[0x0102, 65535]);
        assert!(bytes.ends_with(&[0x01, 0x02, 0xff, 0xff]));
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 1, vec![0x0102, 65535]));
    }

    #[test]
    fn header_comments_are_skipped_and_truncation_is_an_error() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\x09".to_vec();
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 1, vec![7, 9]));
        assert!(matches!(decode_pgm(&bytes[..bytes.len() - 1]), Err(Error::Data(_))));
        assert!(matches!(decode_ppm(&bytes), Err(Error::Data(_))));
    }
}
