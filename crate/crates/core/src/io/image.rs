use std::path::Path;

use image::imageops::FilterType;
use image::{ColorType, DynamicImage};

use crate::backend::{ArchEntry, Tensor};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;

fn ingestion(path: &Path, reason: impl ToString) -> Error {
    Error::Ingestion { path: path.to_path_buf(), reason: reason.to_string() }
}

fn is_grey(c: ColorType) -> bool {
    matches!(c, ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16)
}

/// Reads an image, resizes it bilinearly to the entry's input size (aspect
/// ratio not preserved), and normalizes it. Greyscale sources are refused
/// for colour models.
pub fn load_image(path: &Path, entry: &ArchEntry) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| ingestion(path, e))?;
    if entry.input_channels == 3 && is_grey(img.color()) {
        return Err(ingestion(path, "greyscale-only image; an RGB image is required"));
    }
    from_dynamic(&img, entry).map_err(|e| ingestion(path, e))
}

pub fn from_dynamic(img: &DynamicImage, entry: &ArchEntry) -> Result<ImageTensor> {
    let [h, w] = entry.input_size;
    let resized = img.resize_exact(w as u32, h as u32, FilterType::Triangle);
    let pixels = match entry.input_channels {
        3 => {
            let rgb = resized.to_rgb32f();
            Tensor::from_shape_fn((3, h, w), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f64)
        }
        1 => {
            let luma = resized.to_luma32f();
            Tensor::from_shape_fn((1, h, w), |(_, y, x)| luma.get_pixel(x as u32, y as u32)[0] as f64)
        }
        n => return Err(Error::config(format!("unsupported input channel count {n}"))),
    };
    ImageTensor::from_pixels(pixels.mapv(|v| v.clamp(0.0, 1.0)), &entry.mean, &entry.std)
}

/// `[0, 1]` pixels to an 8-bit RGB image (single channel is replicated).
pub fn to_rgb8(pixels: &Tensor) -> image::RgbImage {
    let (c, h, w) = pixels.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (pixels[[ch.min(c - 1), y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Writes `[0, 1]` pixels as a PNG.
pub fn save_pixels(path: &Path, pixels: &Tensor) -> Result<()> {
    to_rgb8(pixels).save(path)?;
    Ok(())
}
