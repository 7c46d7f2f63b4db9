//! Conversion between `[3, s, s]` tensors in `[-1, 1]` and 8-bit files.
//! Quantization happens only here.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::FilterType;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn quantize(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

fn square_size(shape: &[usize]) -> Result<usize> {
    match shape {
        [3, h, w] if h == w => Ok(*h),
        _ => Err(Error::contract(format!("expected a [3, s, s] image, got {shape:?}"))),
    }
}

pub fn to_rgb8<S: Scalar>(img: &Tensor<S>) -> Result<RgbImage> {
    let s = square_size(img.shape())?;
    let d = img.data();
    let plane = s * s;
    Ok(RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let i = y as usize * s + x as usize;
        image::Rgb([0, 1, 2].map(|c| quantize(d[c * plane + i].as_f64())))
    }))
}

/// Centre-crops to a square, resizes to `size` if needed, and maps to `[-1, 1]`.
pub fn from_dynamic(img: DynamicImage, size: usize) -> Tensor<f64> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let mut img = img.crop_imm((w - side) / 2, (h - side) / 2, side, side).to_rgb8();
    if side as usize != size {
        img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    }
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            data[c * plane + i] = dequantize(p[c]);
        }
    }
    Tensor::new(vec![3, size, size], data).expect("pixels are finite")
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })?;
    Ok(from_dynamic(img, size))
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    let map_err = |e: image::ImageError| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    match ImageFormat::from_path(path) {
        Ok(ImageFormat::Pnm) | Err(_) => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            PnmEncoder::new(&mut w)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
                .map_err(map_err)?;
            w.flush().map_err(|e| Error::io(path, e))
        }
        Ok(format) => img.save_with_format(path, format).map_err(map_err),
    }
}

/// Writes a binary PPM (or PNG, by extension).
pub fn save_image<S: Scalar>(img: &Tensor<S>, path: &Path) -> Result<()> {
    save(&to_rgb8(img)?, path)
}

/// Tiles images row-major into a grid with `cols` columns and a 1-pixel gap.
pub fn image_grid<S: Scalar>(images: &[Tensor<S>], cols: usize) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| Error::contract("image grid needs at least one image"))?;
    let s = square_size(first.shape())?;
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let cell = s + 1;
    let mut grid = RgbImage::from_pixel((cols * cell - 1) as u32, (rows * cell - 1) as u32, image::Rgb([255; 3]));
    for (k, img) in images.iter().enumerate() {
        let tile = to_rgb8(img)?;
        let (ox, oy) = ((k % cols) * cell, (k / cols) * cell);
        image::imageops::replace(&mut grid, &tile, ox as i64, oy as i64);
    }
    Ok(grid)
}

pub fn save_grid<S: Scalar>(images: &[Tensor<S>], cols: usize, path: &Path) -> Result<()> {
    save(&image_grid(images, cols)?, path)
}
