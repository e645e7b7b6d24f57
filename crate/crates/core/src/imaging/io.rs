//! PNG interchange: 8- or 16-bit files to and from `[0, 1]` float tensors.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::{EdgeMap, ImageTensor};
use crate::error::{usage, Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn is_16bit(img: &DynamicImage) -> bool {
    img.color().bytes_per_pixel() / img.color().channel_count() >= 2
}

/// Reads a PNG as a `(1, 3, H, W)` image; grayscale files are replicated to RGB.
pub fn read_rgb(path: &Path) -> Result<ImageTensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    if is_16bit(&img) {
        let buf = img.to_rgb16();
        for (i, p) in buf.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = p[c] as f64 / 65535.0;
            }
        }
    } else {
        let buf = img.to_rgb8();
        for (i, p) in buf.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = p[c] as f64 / 255.0;
            }
        }
    }
    ImageTensor::new(Tensor::new(vec![1, 3, h, w], data)?)
}

/// Reads a PNG as a single-channel `(1, 1, H, W)` map in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if is_16bit(&img) {
        img.to_luma16().pixels().map(|p| p[0] as f64 / 65535.0).collect()
    } else {
        img.to_luma8().pixels().map(|p| p[0] as f64 / 255.0).collect()
    };
    Tensor::new(vec![1, 1, h, w], data)
}

pub fn read_edge_map(path: &Path) -> Result<EdgeMap> {
    EdgeMap::new(read_gray(path)?)
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn save<P, C>(buf: ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes batch item `index` of a 1- or 3-channel tensor as a PNG.
pub fn write_png(t: &Tensor, index: usize, path: &Path, sixteen_bit: bool) -> Result<()> {
    let (b, c, h, w) = t.dims4()?;
    if index >= b {
        return Err(usage(format!("batch index {index} out of range")));
    }
    let plane = &t.data()[index * c * h * w..(index + 1) * c * h * w];
    let (wu, hu) = (w as u32, h as u32);
    match (c, sixteen_bit) {
        (1, false) => save(
            GrayImage::from_fn(wu, hu, |x, y| Luma([quantize8(plane[y as usize * w + x as usize])])),
            path,
        ),
        (1, true) => save(
            ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(wu, hu, |x, y| {
                Luma([quantize16(plane[y as usize * w + x as usize])])
            }),
            path,
        ),
        (3, false) => save(
            RgbImage::from_fn(wu, hu, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb([quantize8(plane[i]), quantize8(plane[h * w + i]), quantize8(plane[2 * h * w + i])])
            }),
            path,
        ),
        (3, true) => save(
            ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(wu, hu, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb([quantize16(plane[i]), quantize16(plane[h * w + i]), quantize16(plane[2 * h * w + i])])
            }),
            path,
        ),
        _ => Err(usage(format!("cannot write a {c}-channel tensor as PNG"))),
    }
}
