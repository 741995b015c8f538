//! Binary PGM (P5) / PPM (P6) codecs for 8-bit images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: msg.into(),
    }
}

/// Decodes PGM/PPM bytes into a `[3, H, W]` tensor in `[0, 1]`.
/// Gray images are replicated across the three channels.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
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
            return Err(format_err(path, "truncated PNM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format_err(path, format!("unsupported PNM magic {other:?}"))),
    };
    let num = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad PNM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(format_err(
            path,
            format!("unsupported PNM geometry {w}x{h} max {maxval}"),
        ));
    }
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format_err(path, "truncated PNM raster"))?;
    let maxval = maxval as f32;
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let src = if channels == 1 {
                    raster[y * w + x]
                } else {
                    raster[(y * w + x) * 3 + c]
                };
                data[(c * h + y) * w + x] = src as f32 / maxval;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Encodes the channel mean of a `[C, H, W]` image as 8-bit PGM.
pub fn encode_pgm(image: &Tensor<f32>) -> Vec<u8> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            let v: f32 = (0..c).map(|ch| d[(ch * h + y) * w + x]).sum::<f32>() / c as f32;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = Tensor::new(&[1, 2, 3], vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let bytes = encode_pgm(&img);
        let back = decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(back.shape(), &[3, 2, 3]);
        for (a, b) in back.data()[..6].iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn truncated_raster_is_an_error() {
        let bytes = b"P5\n4 4\n255\n\x00\x00".to_vec();
        assert!(decode(&bytes, Path::new("x.pgm")).is_err());
    }
}
