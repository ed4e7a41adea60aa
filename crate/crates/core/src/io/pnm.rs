//! Binary portable pixmaps (P6) and graymaps (P5), 8 bits per sample.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for p in 0..h * w {
        out.extend(image.rgb(p).map(to_byte));
    }
    out
}

pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} samples for {width}x{height}",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

/// Parses the header, returning (magic, width, height, maxval, payload
/// offset). Comments are allowed between fields.
fn header(bytes: &[u8]) -> Result<(&[u8], usize, usize, usize, usize)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated pixmap header".into()));
        }
        fields.push(&bytes[start..pos]);
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let num = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::Format(format!(
                    "bad pixmap header field {:?}",
                    String::from_utf8_lossy(f)
                ))
            })
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!(
            "only 8-bit pixmaps are supported, maxval {max}"
        )));
    }
    Ok((fields[0], w, h, max, pos))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (magic, w, h, _, pos) = header(bytes)?;
    if magic != b"P6" {
        return Err(Error::Format("not a binary pixmap (P6)".into()));
    }
    let payload = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| Error::Format("truncated pixmap".into()))?;
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (p, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Returns (width, height, samples).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (magic, w, h, _, pos) = header(bytes)?;
    if magic != b"P5" {
        return Err(Error::Format("not a binary graymap (P5)".into()));
    }
    let payload = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format("truncated graymap".into()))?;
    Ok((w, h, payload.to_vec()))
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixmap_round_trip_on_byte_levels() {
        let data: Vec<f32> = (0..3 * 6).map(|i| (i * 13 % 256) as f32 / 255.0).collect();
        let img = Image::new(2, 3, data).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.rgb(0), [1.0, 0.0, 0.2]);
    }

    #[test]
    fn graymap_round_trip_and_errors() {
        let bytes = encode_pgm(2, 2, &[0, 1, 2, 3]).unwrap();
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 2, vec![0, 1, 2, 3]));
        assert!(decode_ppm(&bytes).is_err());
        assert!(decode_pgm(&bytes[..bytes.len() - 1]).is_err());
    }
}
