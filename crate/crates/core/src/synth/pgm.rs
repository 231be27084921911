//! Binary greyscale PGM ("P5", maxval 255).

use std::path::Path;

use crate::error::{Error, Result};

/// Values are clamped to [0, 1] and rounded to the nearest of 256 levels.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0
}

pub fn encode(width: usize, height: usize, pixels: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| quantize(v)));
    out
}

/// Returns `(width, height, pixels in [0, 1])`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = next_token(bytes, &mut pos).ok_or_else(|| bad("missing magic"))?;
    if magic != b"P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    for f in &mut fields {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| bad("truncated header"))?;
        *f = std::str::from_utf8(tok).ok().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad header field"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated raster"))?;
    Ok((width, height, raster.iter().map(|&q| dequantize(q)).collect()))
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    std::fs::write(path, encode(width, height, pixels)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn bad(msg: &str) -> Error {
    Error::Dataset(msg.to_string())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_of_quantized_values() {
        let px: Vec<f32> = (0..12).map(|i| dequantize((i * 20) as u8)).collect();
        let (w, h, back) = decode(&encode(4, 3, &px)).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, px);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        assert_eq!(decode(&bytes).unwrap().2, vec![0.0, 1.0]);
    }

    #[test]
    fn truncated_raster_rejected() {
        assert!(decode(b"P5 4 4 255\n\x00\x01").is_err());
    }
}
