//! PPM (P6/P3) and headerless RGB8 image input.

use std::path::Path;

use binaryvit::error::{Error, Result};
use binaryvit::tensor::FloatTensor;

fn bad(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}

/// Splits a PPM header into whitespace-separated tokens, skipping `#`
/// comments; returns the tokens and the offset just past the last one.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(bad("PPM header is truncated"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i))
}

fn parse_dim(s: &str, what: &str) -> Result<usize> {
    s.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| bad(format!("PPM {what} '{s}' is not a positive integer")))
}

/// Decodes a PPM into an `H × W × 3` tensor of `[0, 255]` values.
pub fn decode_ppm(bytes: &[u8]) -> Result<FloatTensor> {
    let (t, end) = header_tokens(bytes, 4)?;
    let (w, h) = (parse_dim(&t[1], "width")?, parse_dim(&t[2], "height")?);
    let maxval = parse_dim(&t[3], "maxval")?;
    if maxval > 255 {
        return Err(bad(format!("PPM maxval {maxval} needs 16-bit samples, only 8-bit is supported")));
    }
    let n = w * h * 3;
    let scale = 255.0 / maxval as f64;
    let samples: Vec<f64> = match t[0].as_str() {
        "P6" => {
            // exactly one whitespace byte separates the header from the raster
            let raster = bytes.get(end + 1..).unwrap_or(&[]);
            if raster.len() < n {
                return Err(bad(format!("PPM raster has {} bytes, expected {n}", raster.len())));
            }
            raster[..n].iter().map(|&b| b as f64).collect()
        }
        "P3" => {
            let text = std::str::from_utf8(&bytes[end..]).map_err(|_| bad("P3 raster is not text"))?;
            let v: Vec<f64> = text
                .split_ascii_whitespace()
                .take(n)
                .map(|s| s.parse::<u32>().map(f64::from).map_err(|_| bad(format!("bad P3 sample '{s}'"))))
                .collect::<Result<_>>()?;
            if v.len() < n {
                return Err(bad(format!("P3 raster has {} samples, expected {n}", v.len())));
            }
            v
        }
        magic => return Err(bad(format!("unsupported image magic '{magic}' (expected P6 or P3)"))),
    };
    if samples.iter().any(|&s| s > maxval as f64) {
        return Err(bad("PPM sample exceeds maxval"));
    }
    FloatTensor::new(vec![h, w, 3], samples.into_iter().map(|s| (s * scale).round()).collect())
}

/// Headerless square RGB8: the side is inferred from the length.
pub fn decode_raw(bytes: &[u8]) -> Result<FloatTensor> {
    let pixels = bytes.len() / 3;
    let side = (pixels as f64).sqrt().round() as usize;
    if bytes.is_empty() || bytes.len() % 3 != 0 || side * side != pixels {
        return Err(bad(format!("raw RGB8 input of {} bytes is not a square H×W×3 image", bytes.len())));
    }
    FloatTensor::new(vec![side, side, 3], bytes.iter().map(|&b| b as f64).collect())
}

pub fn read_image(path: &Path) -> Result<FloatTensor> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        decode_ppm(&bytes)
    } else {
        decode_raw(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_with_comment() {
        let mut b = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[1, 2, 3, 250, 251, 252]);
        let t = decode_ppm(&b).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 250.0, 251.0, 252.0]);
    }

    #[test]
    fn p3_rescales_maxval() {
        let t = decode_ppm(b"P3 1 1 15\n15 0 5\n").unwrap();
        assert_eq!(t.data(), &[255.0, 0.0, 85.0]);
    }

    #[test]
    fn truncated_and_wide_rejected() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\x01\x02").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n").is_err());
        assert!(decode_ppm(b"P6\n1").is_err());
    }

    #[test]
    fn raw_square_only() {
        assert_eq!(decode_raw(&[7u8; 12]).unwrap().shape(), &[2, 2, 3]);
        assert!(decode_raw(&[7u8; 15]).is_err());
    }
}
