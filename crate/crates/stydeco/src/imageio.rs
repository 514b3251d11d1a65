//! PNG/JPEG decoding into `[-1, 1]` tensors and lossless PNG output.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use stydeco_core::{ImageTensor, Tensor};

use crate::error::{Error, IoContext, Result};

/// `[0, 255] → [-1, 1]`.
pub fn byte_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Clamps to `[-1, 1]` and maps back to the nearest byte.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn rgb_to_tensor(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let p = w * h;
    let mut data = vec![0.0; 3 * p];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * p + i] = byte_to_unit(px[c]);
        }
    }
    ImageTensor::new(Tensor::new(&[3, h, w], data)).expect("byte images are finite")
}

pub fn tensor_to_rgb(img: &ImageTensor) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let p = h * w;
    let d = img.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([unit_to_byte(d[i]), unit_to_byte(d[p + i]), unit_to_byte(d[2 * p + i])])
    })
}

pub fn decode_image(bytes: &[u8], size: usize, label: &Path) -> Result<ImageTensor> {
    let dynimg = image::load_from_memory(bytes).map_err(|source| Error::Image {
        path: label.to_path_buf(),
        source,
    })?;
    // Grayscale is replicated to three channels; alpha is dropped.
    let mut rgb = dynimg.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    Ok(rgb_to_tensor(&rgb))
}

/// Reads an image, converts it to RGB and bilinearly resizes it to
/// `size × size` (no resampling when it already has that size).
pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).at(path)?;
    decode_image(&bytes, size, path)
}

/// Reads an image at its native size.
pub fn load_image_native(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(rgb_to_tensor(&dynimg.to_rgb8()))
}

pub fn encode_png(img: &ImageTensor) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    tensor_to_rgb(img)
        .write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory");
    buf.into_inner()
}

/// Writes a PNG atomically.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode_png(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_lattice_round_trip() {
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(unit_to_byte(1.5), 255);
        assert_eq!(unit_to_byte(-1.0), 0);
    }
}
