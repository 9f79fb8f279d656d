//! Image persistence: 8-bit PNG for inspection and a raw little-endian f32
//! container for exact pipelines.
//!
//! Container layout: `b"VGF1"`, then `H`, `W`, `C` as `u32` LE, then
//! `H·W·C` f32 LE values in row-major HWC order.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::ImageTensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VGF1";
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Raw,
}

impl ImageFormat {
    /// `.png` selects PNG; anything else uses the float container.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => Self::Png,
            _ => Self::Raw,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Png => "png",
            Self::Raw => "vgf",
        }
    }
}

fn invalid(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Io(io::Error::new(
        ErrorKind::InvalidData,
        format!("{}: {reason}", path.display()),
    ))
}

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    match ImageFormat::from_path(path) {
        ImageFormat::Png => save_png(img, path),
        ImageFormat::Raw => save_raw(img, path),
    }
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    match ImageFormat::from_path(path) {
        ImageFormat::Png => load_png(path),
        ImageFormat::Raw => load_raw(path),
    }
}

pub fn save_raw(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + img.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    for dim in [img.height, img.width, img.channels] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in img.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(invalid(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(invalid(path, "bad magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| invalid(path, "header dimensions overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(invalid(
            path,
            format!("expected {expected} data bytes for {h}×{w}×{c}, found {}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageTensor::new(h, w, c, data).map_err(|e| invalid(path, e))
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let dynamic = if img.channels == 3 {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("buffer size matches"))
    } else {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("buffer size matches"))
    };
    dynamic.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let decoded = image::open(path).map_err(|e| invalid(path, e))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, bytes) = match decoded.color().channel_count() {
        1 | 2 => (1, decoded.into_luma8().into_raw()),
        _ => (3, decoded.into_rgb8().into_raw()),
    };
    let data = bytes.into_iter().map(|b| b as f32 / 255.0).collect();
    ImageTensor::new(h, w, channels, data).map_err(|e| invalid(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> ImageTensor {
        let data = (0..16 * 12 * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        ImageTensor::new(16, 12, 3, data).unwrap()
    }

    #[test]
    fn float_container_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vgf");
        let img = probe();
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn png_is_within_half_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = ImageTensor::filled(8, 8, 1, 0.5).unwrap();
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.data().iter().all(|&v| (v as f64 - 0.5).abs() <= 1.0 / 510.0 + 1e-7));
        let p3 = dir.path().join("b.png");
        save_image(&probe(), &p3).unwrap();
        assert!(load_image(&p3).unwrap().linf_distance(&probe()).unwrap() <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn truncated_or_mismatched_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vgf");
        save_raw(&probe(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Io(_))));
        fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Io(_))));
        assert!(matches!(load_image(&dir.path().join("missing.vgf")), Err(Error::Io(_))));
        let png = dir.path().join("bad.png");
        fs::write(&png, b"not a png").unwrap();
        assert!(matches!(load_image(&png), Err(Error::Io(_))));
    }
}
