use super::font::{self, GLYPH_H, GLYPH_W, PITCH};
use super::Raster;

/// A fill color, converted to the target raster's channel layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paint {
    Gray(u8),
    Rgb([u8; 3]),
}

impl Paint {
    fn write(&self, px: &mut [u8]) {
        match (*self, px.len()) {
            (Paint::Gray(v), 1) => px[0] = v,
            (Paint::Gray(v), _) => px.fill(v),
            (Paint::Rgb(c), 3) => px.copy_from_slice(&c),
            (Paint::Rgb([r, g, b]), _) => {
                px[0] = (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
            }
        }
    }
}

/// Fill `[x1, x2) x [y1, y2)`, clipped to the raster.
pub fn fill_rect(img: &mut Raster, x1: usize, y1: usize, x2: usize, y2: usize, paint: Paint) {
    let x2 = x2.min(img.width());
    let y2 = y2.min(img.height());
    for y in y1..y2 {
        for x in x1..x2 {
            paint.write(img.pixel_mut(x, y));
        }
    }
}

/// Rectangle with corners rounded by `radius` pixels, clipped to the raster.
pub fn fill_rounded_rect(img: &mut Raster, x1: usize, y1: usize, x2: usize, y2: usize, radius: usize, paint: Paint) {
    let radius = radius.min((x2 - x1) / 2).min((y2 - y1) / 2) as i64;
    let (ix1, iy1, ix2, iy2) = (x1 as i64, y1 as i64, x2 as i64 - 1, y2 as i64 - 1);
    for y in y1..y2.min(img.height()) {
        for x in x1..x2.min(img.width()) {
            let (xi, yi) = (x as i64, y as i64);
            let cx = if xi < ix1 + radius {
                ix1 + radius
            } else if xi > ix2 - radius {
                ix2 - radius
            } else {
                xi
            };
            let cy = if yi < iy1 + radius {
                iy1 + radius
            } else if yi > iy2 - radius {
                iy2 - radius
            } else {
                yi
            };
            let (dx, dy) = (xi - cx, yi - cy);
            if dx * dx + dy * dy <= radius * radius {
                paint.write(img.pixel_mut(x, y));
            }
        }
    }
}

/// Outline of `[x1, x2) x [y1, y2)` drawn inward with the given thickness.
pub fn draw_rect_outline(img: &mut Raster, x1: usize, y1: usize, x2: usize, y2: usize, thickness: usize, paint: Paint) {
    let t = thickness.min((x2 - x1).div_ceil(2)).min((y2 - y1).div_ceil(2));
    fill_rect(img, x1, y1, x2, y1 + t, paint);
    fill_rect(img, x1, y2 - t, x2, y2, paint);
    fill_rect(img, x1, y1, x1 + t, y2, paint);
    fill_rect(img, x2 - t, y1, x2, y2, paint);
}

/// Pixel width of `text` rendered at `scale`.
pub fn text_width(text: &str, scale: usize) -> usize {
    let n = text.chars().count();
    if n == 0 {
        0
    } else {
        (n * PITCH - 1) * scale
    }
}

/// Render `text` with its top-left corner at (x, y). Each font module is a
/// `scale x scale` block. Characters without a glyph leave a blank cell.
pub fn draw_text(img: &mut Raster, x: usize, y: usize, text: &str, scale: usize, paint: Paint) {
    for (i, c) in text.chars().enumerate() {
        let Some(g) = font::glyph(c) else { continue };
        let ox = x + i * PITCH * scale;
        for row in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if font::is_set(g, col, row) {
                    let px = ox + col * scale;
                    let py = y + row * scale;
                    fill_rect(img, px, py, px + scale, py + scale, paint);
                }
            }
        }
    }
}
