use super::{BinaryRaster, ImageError, Raster, Result};
use crate::par::{self, Exec};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Luma conversion `round(0.299 R + 0.587 G + 0.114 B)`. Gray input is
/// returned unchanged.
pub fn to_grayscale(img: &Raster) -> Raster {
    if img.is_gray() {
        return img.clone();
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            let v = LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64;
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Raster::new(img.width(), img.height(), 1, data).expect("same dims")
}

fn check_kernel(size: usize, min: usize) -> Result<()> {
    if size < min || size.is_multiple_of(2) {
        return Err(ImageError::Kernel(size, min));
    }
    Ok(())
}

/// Copy of `src` (w x h, one byte per pixel) padded by `r` on every side
/// with replicated edge pixels.
fn pad_replicate(src: &[u8], w: usize, h: usize, r: usize) -> Vec<u8> {
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    let mut out = vec![0u8; pw * ph];
    for py in 0..ph {
        let sy = py.saturating_sub(r).min(h - 1);
        let row = &src[sy * w..sy * w + w];
        let dst = &mut out[py * pw..py * pw + pw];
        dst[..r].fill(row[0]);
        dst[r..r + w].copy_from_slice(row);
        dst[r + w..].fill(row[w - 1]);
    }
    out
}

/// Summed-area table of `src` (pw x ph), shape (pw+1) x (ph+1).
fn integral(src: &[u8], pw: usize, ph: usize) -> Vec<u64> {
    let iw = pw + 1;
    let mut sat = vec![0u64; iw * (ph + 1)];
    for y in 0..ph {
        let mut run = 0u64;
        for x in 0..pw {
            run += src[y * pw + x] as u64;
            sat[(y + 1) * iw + x + 1] = sat[y * iw + x + 1] + run;
        }
    }
    sat
}

/// Window sums of a `k x k` neighborhood (replicate borders) for every pixel.
fn window_sums(exec: Exec, src: &[u8], w: usize, h: usize, k: usize) -> Vec<u64> {
    let r = k / 2;
    let pw = w + 2 * r;
    let padded = pad_replicate(src, w, h, r);
    let sat = integral(&padded, pw, h + 2 * r);
    let iw = pw + 1;
    let mut out = vec![0u64; w * h];
    par::for_each_row(exec, &mut out, w, |y, row| {
        for (x, v) in row.iter_mut().enumerate() {
            let (x0, y0, x1, y1) = (x, y, x + k, y + k);
            *v = sat[y1 * iw + x1] + sat[y0 * iw + x0] - sat[y0 * iw + x1] - sat[y1 * iw + x0];
        }
    });
    out
}

/// Normalized 1-D Gaussian weights of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    check_kernel(size, 1)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ImageError::Sigma);
    }
    let r = (size / 2) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Convolution with the normalized 2-D Gaussian `g(i) g(j)`, replicate
/// borders, rounded to the nearest integer.
pub fn gaussian_blur(img: &Raster, kernel: usize, sigma: f64) -> Result<Raster> {
    if !img.is_gray() {
        return Err(ImageError::NotGray);
    }
    let g = gaussian_kernel(kernel, sigma)?;
    if kernel == 1 {
        return Ok(img.clone());
    }
    let weights: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let (w, h) = (img.width(), img.height());
    let r = kernel / 2;
    let pw = w + 2 * r;
    let padded: Vec<f64> = pad_replicate(img.data(), w, h, r).into_iter().map(f64::from).collect();
    let mut out = vec![0u8; w * h];
    par::for_each_row(Exec::default(), &mut out, w, |y, row| {
        // Every pixel still accumulates its taps in (ky, kx) order; only
        // the loop over x moved innermost.
        let mut acc = vec![0.0f64; w];
        for (ky, wrow) in weights.chunks_exact(kernel).enumerate() {
            let src = &padded[(y + ky) * pw..(y + ky + 1) * pw];
            for (kx, &wt) in wrow.iter().enumerate() {
                for (a, &p) in acc.iter_mut().zip(&src[kx..kx + w]) {
                    *a += wt * p;
                }
            }
        }
        for (v, a) in row.iter_mut().zip(&acc) {
            *v = a.round().clamp(0.0, 255.0) as u8;
        }
    });
    Ok(Raster::new(w, h, 1, out).expect("same dims"))
}

/// Local-mean thresholding: a pixel is foreground when it exceeds the
/// mean of its `block x block` neighborhood by more than `offset`.
///
/// The comparison is carried out in integers (`p * n > sum + offset * n`)
/// so it is exact.
pub fn adaptive_threshold(img: &Raster, block: usize, offset: i32) -> Result<BinaryRaster> {
    if !img.is_gray() {
        return Err(ImageError::NotGray);
    }
    check_kernel(block, 3)?;
    let (w, h) = (img.width(), img.height());
    let n = (block * block) as i64;
    let sums = window_sums(Exec::default(), img.data(), w, h, block);
    let src = img.data();
    let mut out = vec![0u8; w * h];
    par::for_each_row(Exec::default(), &mut out, w, |y, row| {
        for (x, v) in row.iter_mut().enumerate() {
            let i = y * w + x;
            let lhs = src[i] as i64 * n;
            let rhs = sums[i] as i64 + offset as i64 * n;
            *v = if lhs > rhs { 255 } else { 0 };
        }
    });
    Ok(BinaryRaster::from_raw(w, h, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Dilate,
    Erode,
}

/// Foreground counts per `k x k` window of a binary mask.
fn binary_counts(img: &BinaryRaster, k: usize) -> Vec<u64> {
    let ones: Vec<u8> = img.data().iter().map(|&v| (v == 255) as u8).collect();
    window_sums(Exec::default(), &ones, img.width(), img.height(), k)
}

fn count_filter(img: &BinaryRaster, k: usize, keep: impl Fn(u64) -> bool) -> BinaryRaster {
    let counts = binary_counts(img, k);
    let data = counts.iter().map(|&c| if keep(c) { 255 } else { 0 }).collect();
    BinaryRaster::from_raw(img.width(), img.height(), data)
}

/// Max filter (dilate) or min filter (erode) over a square window.
pub fn morphology(img: &BinaryRaster, op: MorphOp, kernel: usize) -> Result<BinaryRaster> {
    check_kernel(kernel, 1)?;
    if kernel == 1 {
        return Ok(img.clone());
    }
    let n = (kernel * kernel) as u64;
    Ok(match op {
        MorphOp::Dilate => count_filter(img, kernel, |c| c > 0),
        MorphOp::Erode => count_filter(img, kernel, |c| c == n),
    })
}

/// Median over a square window; for a binary mask that is a majority vote.
pub fn median_filter(img: &BinaryRaster, kernel: usize) -> Result<BinaryRaster> {
    check_kernel(kernel, 1)?;
    if kernel == 1 {
        return Ok(img.clone());
    }
    let n = (kernel * kernel) as u64;
    Ok(count_filter(img, kernel, |c| 2 * c > n))
}
