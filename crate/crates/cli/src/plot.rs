//! Static raster figures: grayscale panels and signed error maps in a
//! blue-white-red colormap.

use std::path::Path;

use anyhow::{Context, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};
use mcrecon::ImageSlice;

const GAP: u32 = 4;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Signed value in `[-1, 1]` to blue (negative), white (zero), red (positive).
pub fn bwr(t: f64) -> Rgb<u8> {
    let t = t.clamp(-1.0, 1.0);
    let fade = to_u8(1.0 - t.abs());
    if t < 0.0 {
        Rgb([fade, fade, 255])
    } else {
        Rgb([255, fade, fade])
    }
}

fn blit(canvas: &mut RgbImage, x0: u32, y0: u32, h: usize, w: usize, scale: usize, color: impl Fn(usize, usize) -> Rgb<u8>) {
    for i in 0..h * scale {
        for j in 0..w * scale {
            canvas.put_pixel(x0 + j as u32, y0 + i as u32, color(i / scale, j / scale));
        }
    }
}

/// Top row: ground truth then every reconstruction. Bottom row: the
/// reference contrast under the ground truth, then `recon - gt` mapped to
/// blue-white-red with `error_range` at full saturation.
pub fn render_panels(gt: &ImageSlice, reference: &ImageSlice, recons: &[ImageSlice], error_range: f64, scale: usize) -> RgbImage {
    let (h, w) = gt.dim();
    let (ph, pw) = ((h * scale) as u32, (w * scale) as u32);
    let cols = 1 + recons.len() as u32;
    let mut canvas = RgbImage::from_pixel(cols * pw + (cols + 1) * GAP, 2 * ph + 3 * GAP, WHITE);
    let gray = |img: &ImageSlice| {
        let px = img.pixels.clone();
        move |i: usize, j: usize| {
            let v = to_u8(px[[i, j]]);
            Rgb([v, v, v])
        }
    };
    blit(&mut canvas, GAP, GAP, h, w, scale, gray(gt));
    blit(&mut canvas, GAP, 2 * GAP + ph, h, w, scale, gray(reference));
    for (k, r) in recons.iter().enumerate() {
        let x0 = GAP + (k as u32 + 1) * (pw + GAP);
        blit(&mut canvas, x0, GAP, h, w, scale, gray(r));
        let err = &r.pixels - &gt.pixels;
        blit(&mut canvas, x0, 2 * GAP + ph, h, w, scale, |i, j| bwr(err[[i, j]] / error_range));
    }
    canvas
}

pub fn save_gray_png(path: &Path, img: &ImageSlice, scale: usize) -> Result<()> {
    let (h, w) = img.dim();
    let out = GrayImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        Luma([to_u8(img.pixels[[y as usize / scale, x as usize / scale]])])
    });
    out.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcrecon::Contrast;
    use ndarray::Array2;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(bwr(0.0), Rgb([255, 255, 255]));
        assert_eq!(bwr(-1.0), Rgb([0, 0, 255]));
        assert_eq!(bwr(1.0), Rgb([255, 0, 0]));
        assert_eq!(bwr(5.0), bwr(1.0));
    }

    #[test]
    fn panel_geometry_and_error_colors() {
        let gt = ImageSlice::new(Array2::from_elem((4, 6), 0.5), Contrast::T2);
        let over = ImageSlice::new(Array2::from_elem((4, 6), 0.7), Contrast::T2);
        let img = render_panels(&gt, &gt, &[gt.clone(), over], 0.2, 2);
        assert_eq!(img.dimensions(), (3 * 12 + 4 * GAP, 2 * 8 + 3 * GAP));
        // Exact reconstruction: white error map; overshoot: saturated red.
        assert_eq!(*img.get_pixel(GAP + 12 + GAP, 2 * GAP + 8), WHITE);
        assert_eq!(*img.get_pixel(GAP + 2 * (12 + GAP), 2 * GAP + 8), Rgb([255, 0, 0]));
    }
}
