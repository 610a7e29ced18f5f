use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::backend::Tensor;
use crate::error::{Error, Result};
use crate::mask::SaliencyMask;

/// Heat opacity at full saliency.
pub const OVERLAY_ALPHA: f64 = 0.5;

/// Jet colormap: blue through cyan, yellow, to red.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Heat-colored mask blended over the image with per-pixel opacity
/// `OVERLAY_ALPHA * m`.
pub fn overlay_image(pixels: &Tensor, m: &SaliencyMask) -> Result<RgbImage> {
    let (c, h, w) = pixels.dim();
    if m.dim() != (h, w) {
        return Err(Error::input(format!("mask {:?} does not match image {h}x{w}", m.dim())));
    }
    let vals = m.values();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let mv = vals[[y, x]] as f64;
        let a = OVERLAY_ALPHA * mv;
        let heat = jet(mv);
        let px = |ch: usize| {
            let base = pixels[[ch.min(c - 1), y, x]].clamp(0.0, 1.0);
            (((1.0 - a) * base + a * heat[ch]) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn mask_image(m: &SaliencyMask) -> GrayImage {
    let (h, w) = m.dim();
    let vals = m.values();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([(vals[[y as usize, x as usize]] * 255.0).round() as u8]))
}

/// Writes the overlay and the standalone greyscale mask as PNGs.
pub fn render_overlay(pixels: &Tensor, m: &SaliencyMask, overlay_path: &Path, mask_path: &Path) -> Result<()> {
    overlay_image(pixels, m)?.save(overlay_path)?;
    mask_image(m).save(mask_path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::image::to_rgb8;

    fn pixels() -> Tensor {
        Tensor::from_shape_fn((3, 6, 7), |(c, y, x)| ((c * 11 + y * 5 + x * 3) % 13) as f64 / 12.0)
    }

    #[test]
    fn zero_mask_leaves_image() {
        let img = overlay_image(&pixels(), &SaliencyMask::filled((6, 7), 0.0).unwrap()).unwrap();
        assert_eq!(img, to_rgb8(&pixels()));
        assert_eq!(img.dimensions(), (7, 6));
    }

    #[test]
    fn full_mask_tints_everything() {
        let img = overlay_image(&pixels(), &SaliencyMask::filled((6, 7), 1.0).unwrap()).unwrap();
        let plain = to_rgb8(&pixels());
        // jet(1) is dark red: blue and green are pulled to half, red up
        for (a, b) in img.pixels().zip(plain.pixels()) {
            assert!(a[2] <= b[2] && a[1] <= b[1]);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn files_written() {
        let dir = tempfile::tempdir().unwrap();
        let (o, m) = (dir.path().join("o.png"), dir.path().join("m.png"));
        render_overlay(&pixels(), &SaliencyMask::filled((6, 7), 0.3).unwrap(), &o, &m).unwrap();
        assert_eq!(image::image_dimensions(&o).unwrap(), (7, 6));
        assert_eq!(image::image_dimensions(&m).unwrap(), (7, 6));
        assert!(render_overlay(&pixels(), &SaliencyMask::filled((2, 2), 0.3).unwrap(), &o, &m).is_err());
    }
}
