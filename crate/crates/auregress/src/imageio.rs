//! PNG conversion for channel-major `[3, s, s]` image tensors and class maps.

use std::io::Cursor;
use std::path::Path;

use auregress_core::Tensor;
use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{AppError, Result};
use crate::fsutil::write_atomic;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb(image: &Tensor) -> Result<RgbImage> {
    let shape = image.shape();
    let (h, w) = match shape {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => return Err(AppError::Invalid(format!("expected a [3, h, w] image, got {shape:?}"))),
    };
    let d = image.data();
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])])
    }))
}

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("nonempty image")
}

fn png_bytes(path: &Path, img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| AppError::format(path, e))?;
    Ok(buf.into_inner())
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = png_bytes(path, to_rgb(image)?.into())?;
    write_atomic(path, &bytes)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| AppError::format(path, e))?;
    Ok(from_rgb(&img.to_rgb8()))
}

/// Class map stored as an 8-bit grayscale PNG whose values are class indices.
pub fn save_classes(path: &Path, classes: &[u8], size: usize) -> Result<()> {
    let img = GrayImage::from_raw(size as u32, size as u32, classes.to_vec())
        .ok_or_else(|| AppError::Invalid(format!("class map of {} pixels is not {size}x{size}", classes.len())))?;
    let bytes = png_bytes(path, img.into())?;
    write_atomic(path, &bytes)
}

pub fn load_classes(path: &Path) -> Result<(Vec<u8>, usize)> {
    let img = image::open(path).map_err(|e| AppError::format(path, e))?.to_luma8();
    if img.width() != img.height() {
        return Err(AppError::format(path, "class map is not square"));
    }
    Ok((img.as_raw().clone(), img.width() as usize))
}

/// Tiles images `[3, s, s]` into a grid `columns` wide.
pub fn grid(images: &[Tensor], columns: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| AppError::Invalid("empty image grid".into()))?;
    let s = first.shape()[first.shape().len() - 1];
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let (h, w) = (rows * s, columns * s);
    let mut out = vec![1.0; 3 * h * w];
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = (k / columns * s, k % columns * s);
        let d = img.data();
        for c in 0..3 {
            for y in 0..s {
                let src = &d[c * s * s + y * s..c * s * s + (y + 1) * s];
                let dst = c * h * w + (oy + y) * w + ox;
                out[dst..dst + s].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::new(&[3, h, w], out)?)
}
