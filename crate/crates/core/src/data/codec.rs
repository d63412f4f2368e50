//! PNG codec for images (8-bit RGB) and masks (8-bit grayscale).
//!
//! A byte `v` maps to `v / 127.5 − 1`; encoding clamps to `[-1, 1]` and
//! rounds half away from zero.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel intensity at or above which a mask pixel counts as object.
pub const MASK_THRESHOLD: u8 = 128;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn reject_deep(path: &Path, img: &DynamicImage) -> Result<()> {
    use image::ColorType::*;
    match img.color() {
        L8 | La8 | Rgb8 | Rgba8 => Ok(()),
        other => Err(Error::invalid(format!(
            "{}: unsupported pixel format {other:?} (expected 8-bit channels)",
            path.display()
        ))),
    }
}

pub fn byte_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Interleaved `H×W×C` bytes to a `C×H×W` tensor in `[-1, 1]`.
pub fn bytes_to_tensor(bytes: &[u8], channels: usize, height: usize, width: usize) -> Result<Tensor<f32>> {
    if bytes.len() != channels * height * width {
        return Err(Error::invalid("pixel buffer size does not match dimensions"));
    }
    let plane = height * width;
    Tensor::new(
        [channels, height, width],
        (0..channels * plane)
            .map(|i| byte_to_unit(bytes[(i % plane) * channels + i / plane]))
            .collect(),
    )
}

/// `C×H×W` tensor to interleaved `H×W×C` bytes.
pub fn tensor_to_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("expected a C×H×W image, got {s:?}")));
    }
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = t.data();
    Ok((0..c * plane)
        .map(|i| unit_to_byte(d[(i % c) * plane + i / c]))
        .collect())
}

pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?;
    reject_deep(path, &img)?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    bytes_to_tensor(rgb.as_raw(), 3, h as usize, w as usize)
}

pub fn encode_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 3 || s[0] == 1) {
        return Err(Error::invalid(format!("encode_image: expected 3×H×W or 1×H×W, got {s:?}")));
    }
    let bytes = tensor_to_bytes(t)?;
    let (h, w) = (s[1] as u32, s[2] as u32);
    let result = if s[0] == 3 {
        RgbImage::from_raw(w, h, bytes).map(|i| i.save(path))
    } else {
        GrayImage::from_raw(w, h, bytes).map(|i| i.save(path))
    };
    result
        .expect("buffer sized from shape")
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Binary `1×H×W` mask from a grayscale file.
pub fn decode_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?;
    reject_deep(path, &img)?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Tensor::new(
        [1, h as usize, w as usize],
        g.as_raw()
            .iter()
            .map(|&v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Writes a `1×H×W` binary mask as black/white grayscale.
pub fn encode_mask(mask: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::invalid(format!("encode_mask: expected 1×H×W, got {s:?}")));
    }
    let bytes = mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    GrayImage::from_raw(s[2] as u32, s[1] as u32, bytes)
        .expect("buffer sized from shape")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        assert!((byte_to_unit(128) - 0.003_921_6).abs() < 1e-6);
        assert_eq!(unit_to_byte(-1.0), 0);
        assert_eq!(unit_to_byte(1.0), 255);
        assert_eq!(unit_to_byte(7.0), 255);
    }

    #[test]
    fn roundtrip_error_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut rng = Prng::new(4, 0);
        for _ in 0..100 {
            let t = Tensor::from_fn([3, 5, 4], |_| rng.uniform(-1.2, 1.2) as f32);
            encode_image(&t, &path).unwrap();
            let back = decode_image(&path).unwrap();
            for (a, b) in t.data().iter().zip(back.data()) {
                assert!((a.clamp(-1.0, 1.0) - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn mask_threshold_convention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        GrayImage::from_raw(4, 1, vec![0, 127, 128, 255])
            .unwrap()
            .save(&path)
            .unwrap();
        assert_eq!(decode_mask(&path).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(2, 2, vec![0u16; 12])
            .unwrap()
            .save(&path)
            .unwrap();
        assert!(decode_image(&path).is_err());
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(decode_image(&path).is_err());
    }
}
