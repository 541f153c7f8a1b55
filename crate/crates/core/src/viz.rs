//! Small raster helpers shared by the artifact writers: image quantization,
//! mask colorization, scalar heatmaps, and strip composition.
//!
//! Everything here is presentation-only. Quantization rounds to the 8-bit
//! grid for viewing; exact data always travels separately (f32 raw maps,
//! deltas, CSV). No text is drawn — labels belong in the sidecar files.

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

/// Class colors for mask rendering: background, then the four lesion
/// classes in id order.
pub const CLASS_COLORS: [[u8; 3]; 5] = [
    [15, 15, 18],
    [235, 220, 84],
    [244, 150, 28],
    [196, 32, 38],
    [150, 64, 210],
];

const GAP_COLOR: [u8; 3] = [40, 40, 40];

/// Quantize a `(3, h, w)` float image in `[0, 1]` for viewing.
pub fn rgb_image(x: &Array3<f32>) -> RgbImage {
    let (_, h, w) = x.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for xx in 0..w {
            let px = [
                (x[[0, y, xx]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (x[[1, y, xx]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (x[[2, y, xx]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(xx as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Colorize a class-id mask with [`CLASS_COLORS`] (ids past the palette
/// wrap, which never happens for the five-class corpus).
pub fn mask_rgb(mask: &Array2<u8>) -> RgbImage {
    let (h, w) = mask.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = CLASS_COLORS[mask[[y, x]] as usize % CLASS_COLORS.len()];
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
    img
}

/// Map `t ∈ [0, 1]` through a hot ramp (black → red → yellow → white).
pub fn hot(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Render a non-negative scalar field as a hot heatmap, normalized by
/// `vmax` (or the field's own maximum when `None`). An all-zero field goes
/// all black.
pub fn heatmap_rgb(v: &Array2<f32>, vmax: Option<f32>) -> RgbImage {
    let (h, w) = v.dim();
    let max = vmax.unwrap_or_else(|| v.iter().cloned().fold(0.0f32, f32::max));
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let t = if max > 0.0 { v[[y, x]] / max } else { 0.0 };
            img.put_pixel(x as u32, y as u32, Rgb(hot(t)));
        }
    }
    img
}

/// Integer nearest-neighbor upscale (for rendering small grids as blocky
/// heatmaps).
pub fn upscale(img: &RgbImage, k: u32) -> RgbImage {
    assert!(k >= 1);
    let mut out = RgbImage::new(img.width() * k, img.height() * k);
    for y in 0..out.height() {
        for x in 0..out.width() {
            out.put_pixel(x, y, *img.get_pixel(x / k, y / k));
        }
    }
    out
}

/// Grouped before/after bar chart: one pair of vertical bars per entry,
/// values in `[0, 1]`. Before bars are dim, after bars bright.
pub fn bar_pairs(pairs: &[(f32, f32)], height: u32) -> RgbImage {
    const BAR_W: u32 = 10;
    const GAP: u32 = 8;
    let n = pairs.len() as u32;
    let width = n * (2 * BAR_W + GAP) + GAP;
    let mut img = RgbImage::from_pixel(width.max(1), height, Rgb([22, 22, 26]));
    let mut draw = |x0: u32, v: f32, color: [u8; 3]| {
        let vh = (v.clamp(0.0, 1.0) * (height - 2) as f32).round() as u32;
        for y in (height - 1 - vh)..height.saturating_sub(1) {
            for x in x0..x0 + BAR_W {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    };
    for (i, &(before, after)) in pairs.iter().enumerate() {
        let x0 = GAP + i as u32 * (2 * BAR_W + GAP);
        draw(x0, before, [110, 110, 120]);
        draw(x0 + BAR_W, after, [86, 180, 233]);
    }
    img
}

/// Concatenate images left to right with a `gap`-pixel separator column.
/// Heights may differ; shorter panels are padded with the gap color.
pub fn hstack(panels: &[RgbImage], gap: u32) -> RgbImage {
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(1);
    let w: u32 = panels.iter().map(|p| p.width()).sum::<u32>()
        + gap * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w.max(1), h, Rgb(GAP_COLOR));
    let mut x0 = 0u32;
    for p in panels {
        for y in 0..p.height() {
            for x in 0..p.width() {
                out.put_pixel(x0 + x, y, *p.get_pixel(x, y));
            }
        }
        x0 += p.width() + gap;
    }
    out
}

/// Concatenate images top to bottom with a `gap`-pixel separator row.
pub fn vstack(panels: &[RgbImage], gap: u32) -> RgbImage {
    let w = panels.iter().map(|p| p.width()).max().unwrap_or(1);
    let h: u32 = panels.iter().map(|p| p.height()).sum::<u32>()
        + gap * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h.max(1), Rgb(GAP_COLOR));
    let mut y0 = 0u32;
    for p in panels {
        for y in 0..p.height() {
            for x in 0..p.width() {
                out.put_pixel(x, y0 + y, *p.get_pixel(x, y));
            }
        }
        y0 += p.height() + gap;
    }
    out
}
