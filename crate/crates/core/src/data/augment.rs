//! Online augmentation and conversion of grayscale crops into model input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(x − mean) / std` on grayscale values, applied before channel surgery
/// so the padding channels stay exactly zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Side of the square crop fed to the model.
    pub crop: usize,
    /// Uniform random crop offsets; when off, training crops are centred.
    pub random_crop: bool,
    pub flip: bool,
    /// Independent flip probability per axis.
    pub flip_probability: f64,
    pub photometric: bool,
    /// Brightness offsets are uniform on `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast factors are log-uniform on `[contrast_min, contrast_max]`.
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub standardize: Option<Standardization>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop: 224,
            random_crop: true,
            flip: true,
            flip_probability: 0.5,
            photometric: true,
            brightness: 0.2,
            contrast_min: 0.8,
            contrast_max: 1.25,
            standardize: None,
        }
    }
}

impl AugmentationConfig {
    /// Crops only, centred, no flips or photometric changes.
    pub fn identity(crop: usize) -> Self {
        Self {
            crop,
            random_crop: false,
            flip: false,
            photometric: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, extent: (usize, usize)) -> Result<()> {
        const OP: &str = "augmentation";
        if self.crop == 0 || self.crop > extent.0 || self.crop > extent.1 {
            return Err(Error::invalid(
                OP,
                format!("crop {} does not fit {}x{} images", self.crop, extent.0, extent.1),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid(OP, format!("flip probability {} outside [0, 1]", self.flip_probability)));
        }
        if !(self.brightness.is_finite() && self.brightness >= 0.0) {
            return Err(Error::invalid(OP, format!("brightness range {} must be finite and >= 0", self.brightness)));
        }
        if !(self.contrast_min > 0.0 && self.contrast_min <= self.contrast_max && self.contrast_max.is_finite()) {
            return Err(Error::invalid(
                OP,
                format!("contrast range [{}, {}] must be positive and ordered", self.contrast_min, self.contrast_max),
            ));
        }
        if let Some(s) = &self.standardize {
            if !(s.std > 0.0 && s.std.is_finite() && s.mean.is_finite()) {
                return Err(Error::invalid(OP, "standardization std must be positive"));
            }
        }
        Ok(())
    }
}

/// The random draws behind one augmented crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub x: usize,
    pub y: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub brightness: f32,
    pub contrast: f32,
}

impl AugmentParams {
    /// Draws in a fixed order: x offset, y offset, horizontal flip, vertical
    /// flip, brightness, contrast. Disabled transforms draw nothing.
    pub fn sample<R: Rng>(cfg: &AugmentationConfig, extent: (usize, usize), rng: &mut R) -> Self {
        let (w, h) = extent;
        let (x, y) = if cfg.random_crop {
            (rng.random_range(0..=w - cfg.crop), rng.random_range(0..=h - cfg.crop))
        } else {
            ((w - cfg.crop) / 2, (h - cfg.crop) / 2)
        };
        let (flip_horizontal, flip_vertical) = if cfg.flip {
            (rng.random_bool(cfg.flip_probability), rng.random_bool(cfg.flip_probability))
        } else {
            (false, false)
        };
        let (brightness, contrast) = if cfg.photometric {
            let b = if cfg.brightness > 0.0 {
                rng.random_range(-cfg.brightness..=cfg.brightness)
            } else {
                0.0
            };
            let (lo, hi) = (cfg.contrast_min.ln(), cfg.contrast_max.ln());
            let c = if hi > lo { rng.random_range(lo..=hi).exp() } else { cfg.contrast_min };
            (b as f32, c as f32)
        } else {
            (0.0, 1.0)
        };
        Self {
            x,
            y,
            flip_horizontal,
            flip_vertical,
            brightness,
            contrast,
        }
    }

    pub fn apply(&self, image: &GrayImage, crop: usize) -> Result<GrayImage> {
        let mut out = image.window(self.x, self.y, crop, crop)?;
        if self.flip_horizontal {
            out.flip_horizontal();
        }
        if self.flip_vertical {
            out.flip_vertical();
        }
        if self.brightness != 0.0 || self.contrast != 1.0 {
            for v in &mut out.pixels {
                *v = photometric(*v, self.contrast, self.brightness);
            }
        }
        Ok(out)
    }
}

/// `clamp(contrast·(v − 0.5) + 0.5 + brightness, 0, 1)`.
pub fn photometric(v: f32, contrast: f32, brightness: f32) -> f32 {
    (contrast * (v - 0.5) + 0.5 + brightness).clamp(0.0, 1.0)
}

/// Random unscaled crop with optional flips and brightness/contrast jitter.
pub fn augment<R: Rng>(image: &GrayImage, cfg: &AugmentationConfig, rng: &mut R) -> Result<GrayImage> {
    if cfg.crop > image.width || cfg.crop > image.height {
        return Err(Error::invalid(
            "augment",
            format!("crop {} larger than {}x{} image", cfg.crop, image.width, image.height),
        ));
    }
    AugmentParams::sample(cfg, (image.width, image.height), rng).apply(image, cfg.crop)
}

pub fn center_crop(image: &GrayImage, crop: usize) -> Result<GrayImage> {
    if crop > image.width || crop > image.height {
        return Err(Error::invalid(
            "center_crop",
            format!("crop {crop} larger than {}x{} image", image.width, image.height),
        ));
    }
    image.window((image.width - crop) / 2, (image.height - crop) / 2, crop, crop)
}

/// Places a (1,H,W) grayscale tensor in channel 0 of a (3,H,W) tensor whose
/// other channels are zero.
pub fn to_three_channel<T: Scalar>(gray: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = <[usize; 3]>::try_from(gray.shape())
        .map_err(|_| Error::shape("to_three_channel", format!("expected (1,H,W), got {:?}", gray.shape())))?;
    if c != 1 {
        return Err(Error::shape("to_three_channel", format!("expected 1 channel, got {c}")));
    }
    let mut data = gray.data().to_vec();
    data.resize(3 * h * w, T::zero());
    Tensor::new(&[3, h, w], data)
}

/// Converts a crop to a (3,H,W) model input: optionally standardized
/// grayscale in channel 0, zeros elsewhere.
pub fn image_to_input<T: Scalar>(image: &GrayImage, standardize: Option<&Standardization>) -> Result<Tensor<T>> {
    let values = image.pixels.iter().map(|&v| T::lit(v as f64));
    let values: Vec<T> = match standardize {
        Some(s) => {
            let (m, sd) = (T::lit(s.mean), T::lit(s.std));
            values.map(|v| (v - m) / sd).collect()
        }
        None => values.collect(),
    };
    to_three_channel(&Tensor::new(&[1, image.height, image.width], values)?)
}
