//! Raster images, the PGM/PPM codec and the classical filters used by the
//! parking pipeline.

mod draw;
mod filters;
pub mod font;
mod pnm;

pub use draw::{draw_rect_outline, draw_text, fill_rect, fill_rounded_rect, text_width, Paint};
pub use filters::{
    adaptive_threshold, gaussian_blur, gaussian_kernel, median_filter, morphology, to_grayscale, MorphOp,
};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported magic {0:?}, expected P5 or P6")]
    Magic(String),
    #[error("maxval {0} is not supported, expected 255")]
    MaxVal(u32),
    #[error("truncated body: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error("kernel size {0} must be odd and at least {1}")]
    Kernel(usize, usize),
    #[error("sigma must be positive and finite")]
    Sigma,
    #[error("operation requires a single-channel image")]
    NotGray,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// Row-major 8-bit image with one (gray) or three (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!("dimensions {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Invalid(format!("{channels} channels")));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::Invalid(format!("data length {} != {expected}", data.len())));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Constant image. Panics on zero dimensions or a bad channel count.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels]).expect("valid raster dimensions")
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    /// The channel values of one pixel.
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let o = self.offset(x, y);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// Copy of the half-open rectangle `[x1, x2) x [y1, y2)`.
    pub fn crop(&self, x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Raster> {
        if x1 >= x2 || y1 >= y2 || x2 > self.width || y2 > self.height {
            return Err(ImageError::Invalid(format!(
                "crop ({x1},{y1})-({x2},{y2}) outside {}x{}",
                self.width, self.height
            )));
        }
        let row_bytes = (x2 - x1) * self.channels;
        let mut data = Vec::with_capacity(row_bytes * (y2 - y1));
        for y in y1..y2 {
            let o = self.offset(x1, y);
            data.extend_from_slice(&self.data[o..o + row_bytes]);
        }
        Raster::new(x2 - x1, y2 - y1, self.channels, data)
    }
}

/// Single-channel mask whose pixels are either 0 or 255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryRaster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImageError::Invalid(format!(
                "binary raster {width}x{height} with {} bytes",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v != 0 && v != 255) {
            return Err(ImageError::Invalid(format!("binary pixel value {bad}")));
        }
        Ok(Self { width, height, data })
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert!(data.iter().all(|&v| v == 0 || v == 255));
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 255
    }

    /// Number of 255 pixels in `[x1, x2) x [y1, y2)`.
    pub fn count_in(&self, x1: usize, y1: usize, x2: usize, y2: usize) -> usize {
        (y1..y2)
            .map(|y| {
                self.data[y * self.width + x1..y * self.width + x2]
                    .iter()
                    .filter(|&&v| v == 255)
                    .count()
            })
            .sum()
    }

    pub fn to_raster(&self) -> Raster {
        Raster::new(self.width, self.height, 1, self.data.clone()).expect("valid dims")
    }
}
