//! 8-bit renderings of multispectral images and scatter plots.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{ArrayView2, ArrayView3};

use crate::error::CliResult;

/// Bands shown as R, G, B.
pub fn display_bands(bands: usize) -> [usize; 3] {
    match bands {
        8 => [4, 2, 1],
        4 => [2, 1, 0],
        n if n >= 3 => [2, 1, 0],
        _ => [0, 0, 0],
    }
}

/// Stretches the three displayed bands jointly between their 1st and 99th
/// percentiles.
pub fn rgb(img: ArrayView3<f32>) -> RgbImage {
    let (h, w, c) = img.dim();
    let sel = display_bands(c);
    let mut vals: Vec<f32> = sel.iter().flat_map(|&b| img.index_axis(ndarray::Axis(2), b).iter().copied().collect::<Vec<_>>()).collect();
    vals.sort_by(f32::total_cmp);
    let lo = vals[(vals.len() - 1) / 100];
    let hi = vals[(vals.len() - 1) * 99 / 100];
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |b: usize| {
            let v = (img[[y as usize, x as usize, b]] - lo) / span;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(sel[0]), px(sel[1]), px(sel[2])])
    })
}

/// Values expected in `[0, 1]`.
pub fn gray(map: ArrayView2<f64>) -> GrayImage {
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub const SCATTER_SIDE: u32 = 256;

/// Points drawn on fixed axes `[lo, hi]` so plots of different scenes share
/// one frame.
pub fn scatter(points: &[[f64; 2]], lo: [f64; 2], hi: [f64; 2]) -> RgbImage {
    let side = SCATTER_SIDE;
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    let margin = 8.0;
    let usable = side as f64 - 2.0 * margin;
    for p in points {
        let fx = (p[0] - lo[0]) / (hi[0] - lo[0]).max(1e-12);
        let fy = (p[1] - lo[1]) / (hi[1] - lo[1]).max(1e-12);
        let cx = (margin + fx * usable).round() as i64;
        let cy = (margin + (1.0 - fy) * usable).round() as i64;
        for dy in -2..=2i64 {
            for dx in -2..=2i64 {
                let (x, y) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= 4 && (0..side as i64).contains(&x) && (0..side as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, Rgb([30, 80, 200]));
                }
            }
        }
    }
    img
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save(path)?;
    Ok(())
}
