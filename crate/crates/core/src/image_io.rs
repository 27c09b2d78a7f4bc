//! Binary PPM (P6, 8-bit) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Maps `[0,1]` to a byte, clamping out-of-range values.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest representable 8-bit level.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| to_byte(v) as f64 / 255.0)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(shape_err!("PPM needs 3 channels, got {c}"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out.push(to_byte(image.get(&[ch, i, j])));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
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
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("expected P6, found {:?}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Format(format!("bad PPM header field {s:?}: {e}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PPM supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes
        .get(pos..pos + 3 * h * w)
        .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    Ok(Tensor::from_fn(&[3, h, w], |k| {
        let (ch, r) = (k / (h * w), k % (h * w));
        raster[r * 3 + ch] as f64 / 255.0
    }))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Grayscale rendering of a `[1,H,W]` map, min-max normalised to 0..255.
pub fn normalized_gray(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map.chw()?;
    if c != 1 {
        return Err(shape_err!("expected a single-channel map, got {c}"));
    }
    let (lo, hi) = (map.min(), map.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plane = map.map(|v| (v - lo) / span);
    Ok(Tensor::from_fn(&[3, h, w], |k| plane.data()[k % (h * w)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::uniform;

    #[test]
    fn ppm_round_trip_of_quantized_image() {
        let img = quantize(&uniform(&[3, 5, 7], 0.0, 1.0, 1));
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6\n# hi\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!((t.get(&[0, 0, 0]), t.get(&[2, 0, 1])), (1.0, 1.0));
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn gray_extremes_map_to_0_and_255() {
        let m = Tensor::new(&[1, 1, 3], vec![2.0, 5.0, 3.0]).unwrap();
        let g = normalized_gray(&m).unwrap();
        let bytes = encode_ppm(&g).unwrap();
        let raster = &bytes[bytes.len() - 9..];
        assert_eq!((raster[0], raster[3]), (0, 255));
    }
}
