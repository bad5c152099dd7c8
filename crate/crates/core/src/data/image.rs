//! 8-bit grayscale image files. PGM (binary `P5`) is read and written; PNG
//! is accepted as input.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "{height}×{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    /// Quantizes values in `[0, 1]` to `round(v·255)`; out-of-range values
    /// are clamped.
    pub fn from_unit<T: Scalar>(values: &[T], height: usize, width: usize) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(height, width, pixels)
    }

    /// `1×H×W` tensor scaled by `1/255`.
    pub fn to_unit_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let k = T::from_f64_lossy(1.0 / 255.0);
        let data = self
            .pixels
            .iter()
            .map(|&p| T::from_u8(p).expect("u8 fits") * k)
            .collect();
        Tensor::from_vec(data, &[1, self.height, self.width])
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        let mut pos = 0;
        let token = |pos: &mut usize| -> Result<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(bad("truncated PGM header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        if token(&mut pos)? != "P5" {
            return Err(bad("not a binary PGM (expected magic P5)"));
        }
        let number = |pos: &mut usize, what: &str| -> Result<usize> {
            token(pos)?
                .parse::<usize>()
                .map_err(|_| bad(&format!("invalid PGM {what}")))
        };
        let width = number(&mut pos, "width")?;
        let height = number(&mut pos, "height")?;
        let maxval = number(&mut pos, "maxval")?;
        if maxval != 255 {
            return Err(bad(&format!("only 8-bit PGM is supported (maxval {maxval})")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        if width == 0 || height == 0 || bytes.len() < pos + n {
            return Err(bad("PGM raster is truncated or empty"));
        }
        Self::new(height, width, bytes[pos..pos + n].to_vec())
    }

    pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(
                path,
                format!(
                    "only 8-bit grayscale PNG is supported, got {:?} {:?}",
                    info.color_type, info.bit_depth
                ),
            ));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut pixels = Vec::with_capacity(w * h);
        for row in buf[..info.buffer_size()].chunks(info.line_size) {
            pixels.extend_from_slice(&row[..w]);
        }
        Self::new(h, w, pixels)
    }
}

/// Reads a PGM or PNG file, dispatching on its leading bytes.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        GrayImage::decode_pgm(&bytes, path)
    } else if bytes.starts_with(b"\x89PNG") {
        GrayImage::decode_png(&bytes, path)
    } else {
        Err(Error::format(
            path,
            "unsupported image format (expected binary PGM or PNG)",
        ))
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, img.encode_pgm()).map_err(|e| Error::io(path, e))
}

/// Image file as a `1×H×W` tensor in `[0, 1]`.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    read_gray(path)?.to_unit_tensor()
}

/// Mask file as a `1×H×W` tensor in `{0, 1}`. Any pixel other than 0 or 255
/// is an error listing the offending values.
pub fn load_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = read_gray(path)?;
    mask_tensor(&img, path)
}

pub(crate) fn mask_tensor<T: Scalar>(img: &GrayImage, path: &Path) -> Result<Tensor<T>> {
    let offending: BTreeSet<u8> = img.pixels.iter().copied().filter(|&p| p != 0 && p != 255).collect();
    if !offending.is_empty() {
        let listed: Vec<String> = offending.iter().take(16).map(|v| v.to_string()).collect();
        let more = if offending.len() > 16 { ", ..." } else { "" };
        return Err(Error::format(
            path,
            format!("mask must contain only 0 and 255, found {}{more}", listed.join(", ")),
        ));
    }
    let data = img
        .pixels
        .iter()
        .map(|&p| if p == 255 { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(data, &[1, img.height, img.width])
}

/// Binary mask tensor as 0/255 pixels.
pub fn mask_image<T: Scalar>(mask: &[T], height: usize, width: usize) -> Result<GrayImage> {
    let half = T::from_f64_lossy(0.5);
    let pixels = mask.iter().map(|&v| if v >= half { 255 } else { 0 }).collect();
    GrayImage::new(height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard() -> GrayImage {
        let pixels = (0..4 * 6)
            .map(|i| if (i / 6 + i % 6) % 2 == 0 { 255 } else { 0 })
            .collect();
        GrayImage::new(4, 6, pixels).unwrap()
    }

    #[test]
    fn pgm_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let img = checkerboard();
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_gray(&path).unwrap(), img);
        let m: Tensor<f32> = load_mask(&path).unwrap();
        assert_eq!(m.shape(), [1, 4, 6]);
        assert_eq!(mask_image(m.data(), 4, 6).unwrap(), img);
    }

    #[test]
    fn all_white_mask_is_all_ones() {
        let img = GrayImage::new(3, 3, vec![255; 9]).unwrap();
        let m: Tensor<f64> = mask_tensor(&img, Path::new("x")).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_binary_mask_lists_values() {
        let img = GrayImage::new(1, 4, vec![0, 128, 255, 7]).unwrap();
        let err = mask_tensor::<f32>(&img, Path::new("m.pgm")).unwrap_err().to_string();
        assert!(err.contains("7, 128"), "{err}");
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # made by hand\n2 1\n# max\n255\n\x01\x02";
        let img = GrayImage::decode_pgm(bytes, Path::new("x")).unwrap();
        assert_eq!(img.pixels, [1, 2]);
    }

    #[test]
    fn rejects_ascii_pgm_and_truncation() {
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
        assert!(GrayImage::decode_pgm(b"P5\n4 4\n255\n\x00", Path::new("x")).is_err());
        assert!(GrayImage::decode_pgm(b"P5\n1 1\n65535\n\x00\x00", Path::new("x")).is_err());
    }

    #[test]
    fn png_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = checkerboard();
        {
            let file = std::fs::File::create(&path).unwrap();
            let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&img.pixels).unwrap();
        }
        assert_eq!(read_gray(&path).unwrap(), img);
    }

    #[test]
    fn unknown_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bmp");
        std::fs::write(&path, b"BM....").unwrap();
        assert!(matches!(read_gray(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn unit_quantization() {
        let img = GrayImage::from_unit(&[0.0f64, 0.5, 1.0, 2.0], 2, 2).unwrap();
        assert_eq!(img.pixels, [0, 128, 255, 255]);
        let t: Tensor<f64> = img.to_unit_tensor().unwrap();
        assert_eq!(t.data()[2], 1.0);
    }
}
