use std::path::Path;

use image::{ImageBuffer, ImageReader, Luma};

use crate::error::{Error, Result};

/// Single-channel image with intensities on [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::invalid(
                "gray image",
                format!("{width}x{height} image with {} pixels", pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Copies the `size_w × size_h` window whose top-left corner is `(x, y)`.
    pub fn window(&self, x: usize, y: usize, size_w: usize, size_h: usize) -> Result<Self> {
        if x + size_w > self.width || y + size_h > self.height {
            return Err(Error::invalid(
                "crop",
                format!(
                    "window {size_w}x{size_h} at ({x},{y}) exceeds {}x{} image",
                    self.width, self.height
                ),
            ));
        }
        let mut pixels = Vec::with_capacity(size_w * size_h);
        for row in y..y + size_h {
            let start = row * self.width + x;
            pixels.extend_from_slice(&self.pixels[start..start + size_w]);
        }
        Self::new(size_w, size_h, pixels)
    }

    /// Mirrors columns.
    pub fn flip_horizontal(&mut self) {
        for row in self.pixels.chunks_mut(self.width) {
            row.reverse();
        }
    }

    /// Mirrors rows.
    pub fn flip_vertical(&mut self) {
        let w = self.width;
        for y in 0..self.height / 2 {
            let (top, bottom) = self.pixels.split_at_mut((self.height - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }

    /// Reads an 8- or 16-bit grayscale PNG.
    pub fn load(path: &Path) -> Result<Self> {
        let err = |detail: String| Error::Image {
            path: path.to_path_buf(),
            detail,
        };
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| err(e.to_string()))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let pixels = match img {
            image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            image::DynamicImage::ImageLuma16(buf) => {
                buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
            }
            other => return Err(err(format!("expected single-channel image, found {:?}", other.color()))),
        };
        Self::new(width, height, pixels)
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Reads only the header: `(width, height, channels)`.
pub fn probe(path: &Path) -> Result<(usize, usize, usize)> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoder = reader.into_decoder().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    use image::ImageDecoder;
    let (w, h) = decoder.dimensions();
    Ok((w as usize, h as usize, decoder.color_type().channel_count() as usize))
}
