use std::collections::BTreeMap;

use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [0, 0, 128],
    [128, 128, 0],
];

pub fn class_color(index: usize) -> [u8; 3] {
    if index < PALETTE.len() {
        return PALETTE[index];
    }
    // Spread further classes over the hue circle.
    let hue = (index as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 200.0) as u8, (g * 200.0) as u8, (b * 200.0) as u8]
}

/// Class index of each label, in ascending label order.
pub fn class_indices(labels: &[String]) -> BTreeMap<String, usize> {
    let mut classes: Vec<&String> = labels.iter().collect();
    classes.sort();
    classes.dedup();
    classes.into_iter().enumerate().map(|(i, c)| (c.clone(), i)).collect()
}

/// Scatter plot of `points` on a white square, one color per class, with a
/// column of legend swatches on the right in class order.
pub fn scatter(points: &[[f64; 2]], classes: &[usize], size: u32) -> RgbImage {
    let size = size.max(64);
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let legend = 24u32;
    let margin = 12.0;
    let plot_w = f64::from(size - legend) - 2.0 * margin;
    let plot_h = f64::from(size) - 2.0 * margin;

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = |a: usize| if hi[a] > lo[a] { hi[a] - lo[a] } else { 1.0 };
    let radius = 3i64;
    for (p, &c) in points.iter().zip(classes) {
        let x = margin + (p[0] - lo[0]) / span(0) * plot_w;
        let y = margin + (1.0 - (p[1] - lo[1]) / span(1)) * plot_h;
        let color = Rgb(class_color(c));
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy > radius * radius {
                    continue;
                }
                let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
                if px >= 0 && py >= 0 && px < i64::from(size) && py < i64::from(size) {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }

    let n_classes = classes.iter().max().map_or(0, |m| m + 1);
    let swatch = 8u32;
    for c in 0..n_classes {
        let top = 8 + c as u32 * (swatch + 4);
        if top + swatch >= size {
            break;
        }
        let left = size - legend + 8;
        for y in top..top + swatch {
            for x in left..(left + swatch).min(size) {
                img.put_pixel(x, y, Rgb(class_color(c)));
            }
        }
    }
    img
}
