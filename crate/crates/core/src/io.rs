//! PNG and binary PPM (P6) reading and writing.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage as RawRgb};

use crate::error::{GcrfError, Result};
use crate::image::RgbImage;

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    from_raw(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let raw = to_raw(img);
    let mut out = Cursor::new(Vec::new());
    raw.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
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
            return Err(GcrfError::Format("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| GcrfError::Format("non-ASCII PPM header".into()))?);
    }
    if fields[0] != "P6" {
        return Err(GcrfError::Format(format!("expected P6 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| GcrfError::Format(format!("bad PPM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(GcrfError::Format(format!("only 8-bit PPM supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| GcrfError::Format("truncated PPM raster".into()))?;
    let pixels = raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    RgbImage::new(width, height, pixels)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 3);
    for px in &img.pixels {
        out.extend_from_slice(px);
    }
    out
}

/// Reads a PNG or PPM, chosen by extension (PPM for `.ppm`/`.pnm`).
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    if is_ppm(path) {
        decode_ppm(&bytes)
    } else {
        decode_png(&bytes)
    }
}

pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = if is_ppm(path) {
        encode_ppm(img)
    } else {
        encode_png(img)?
    };
    fs::write(path, bytes)?;
    Ok(())
}

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "ppm" || e == "pnm"
    )
}

fn from_raw(img: RawRgb) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| p.0).collect();
    RgbImage::new(w as usize, h as usize, pixels)
}

fn to_raw(img: &RgbImage) -> RawRgb {
    let flat: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    RawRgb::from_raw(img.width as u32, img.height as u32, flat)
        .expect("pixel buffer length matches dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_image() -> impl Strategy<Value = RgbImage> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<[u8; 3]>(), w * h)
                .prop_map(move |px| RgbImage::new(w, h, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn png_round_trip(img in arb_image()) {
            let bytes = encode_png(&img).unwrap();
            prop_assert_eq!(decode_png(&bytes).unwrap(), img);
        }

        #[test]
        fn ppm_round_trip(img in arb_image()) {
            let bytes = encode_ppm(&img);
            prop_assert_eq!(decode_ppm(&bytes).unwrap(), img);
        }
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixels, vec![[10, 20, 30]]);
    }

    #[test]
    fn corrupt_png_rejected() {
        assert!(decode_png(b"\x89PNG\r\n\x1a\nnot really").is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    }
}
