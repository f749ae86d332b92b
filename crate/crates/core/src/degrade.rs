//! Simulated tiny-object inputs: bicubic downsampling by a batch factor,
//! then nearest or bilinear upsampling back to the network input size.

use image::imageops::{self, FilterType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::imaging::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub scale_divisor: f64,
    pub network_input_size: u32,
    pub seed: u64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            scale_divisor: 16.0,
            network_input_size: 352,
            seed: 0,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_divisor.is_finite() && self.scale_divisor > 0.0) {
            return Err(Error::Argument(format!(
                "scale_divisor must be positive, got {}",
                self.scale_divisor
            )));
        }
        if self.network_input_size == 0 {
            return Err(Error::Argument("network_input_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Upsampler {
    Nearest,
    Bilinear,
}

impl Upsampler {
    fn filter(self) -> FilterType {
        match self {
            Upsampler::Nearest => FilterType::Nearest,
            Upsampler::Bilinear => FilterType::Triangle,
        }
    }
}

/// `max(1, mean(sqrt(w h)) / divisor)`. Panics on an empty slice.
pub fn batch_scale_factor(gt_boxes: &[BoundingBox], spec: &DegradeSpec) -> f64 {
    assert!(!gt_boxes.is_empty(), "batch_scale_factor needs at least one box");
    let avg_side = gt_boxes.iter().map(|b| (b.w * b.h).sqrt()).sum::<f64>() / gt_boxes.len() as f64;
    (avg_side / spec.scale_divisor).max(1.0)
}

/// Upsampler choice for draw `index` of the stream seeded by `spec.seed`.
pub fn choose_upsampler(spec: &DegradeSpec, index: u64) -> Upsampler {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    if rng.gen_bool(0.5) {
        Upsampler::Nearest
    } else {
        Upsampler::Bilinear
    }
}

/// Degrades with the upsampler drawn for stream index 0.
pub fn degrade_image(image: &Frame, d: f64, spec: &DegradeSpec) -> Result<Frame> {
    degrade_with(image, d, spec, choose_upsampler(spec, 0))
}

pub fn degrade_with(image: &Frame, d: f64, spec: &DegradeSpec, up: Upsampler) -> Result<Frame> {
    spec.validate()?;
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Argument(format!("cannot degrade a {w}x{h} image")));
    }
    if !(d.is_finite() && d >= 1.0) {
        return Err(Error::Argument(format!("degradation factor must be >= 1, got {d}")));
    }
    let dw = ((w as f64 / d).round() as u32).max(1);
    let dh = ((h as f64 / d).round() as u32).max(1);
    let small = imageops::resize(image, dw, dh, FilterType::CatmullRom);
    let n = spec.network_input_size;
    Ok(imageops::resize(&small, n, n, up.filter()))
}
