//! Frame type, tensor conversion and crop sampling.
//!
//! Pixel `(row, col)` covers `[col, col + 1] x [row, row + 1]` in continuous
//! image coordinates, so its centre sits at `(col + 0.5, row + 0.5)`. Boxes use
//! the same frame.

use std::path::Path;

use image::{ImageBuffer, Rgb, Rgb32FImage};
use ndarray::{ArrayD, IxDyn};

use crate::autograd::Tensor;
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

pub type Frame = Rgb32FImage;

pub fn blank(width: u32, height: u32, value: f32) -> Frame {
    ImageBuffer::from_pixel(width, height, Rgb([value; 3]))
}

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    let rgb8 = image::DynamicImage::ImageRgb32F(frame.clone()).to_rgb8();
    rgb8.save(path)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_rgb32f())
}

/// `[3, H, W]` tensor in the `[0, 1]` range of the frame.
pub fn to_tensor(frame: &Frame) -> Tensor {
    let (w, h) = frame.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in frame.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = p.0[c] as f64;
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[3, h, w]), data).unwrap()
}

pub fn mean_intensity(frame: &Frame) -> f64 {
    let n = frame.as_raw().len();
    frame.as_raw().iter().map(|&v| v as f64).sum::<f64>() / n as f64
}

/// Mean absolute 4-neighbour Laplacian of the luminance, over interior pixels.
pub fn laplacian_energy(frame: &Frame) -> f64 {
    let (w, h) = frame.dimensions();
    let lum = |x: u32, y: u32| {
        let p = frame.get_pixel(x, y).0;
        (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
    };
    let mut total = 0.0;
    let mut n = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let l = 4.0 * lum(x, y) - lum(x - 1, y) - lum(x + 1, y) - lum(x, y - 1) - lum(x, y + 1);
            total += l.abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Bilinear sample at continuous coordinates, replicating edge pixels.
pub fn sample_bilinear(frame: &Frame, x: f64, y: f64) -> [f32; 3] {
    let (w, h) = frame.dimensions();
    let px = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let py = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = px.floor() as u32;
    let y0 = py.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = (px - x0 as f64) as f32;
    let ty = (py - y0 as f64) as f32;
    let (a, b, c, d) = (
        frame.get_pixel(x0, y0).0,
        frame.get_pixel(x1, y0).0,
        frame.get_pixel(x0, y1).0,
        frame.get_pixel(x1, y1).0,
    );
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - tx) + b[k] * tx;
        let bot = c[k] * (1.0 - tx) + d[k] * tx;
        out[k] = top * (1.0 - ty) + bot * ty;
    }
    out
}

/// Square region of a frame that gets resampled into a network input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    /// Output resolution in pixels.
    pub out: u32,
}

impl CropWindow {
    pub fn new(cx: f64, cy: f64, side: f64, out: u32) -> Self {
        Self { cx, cy, side, out }
    }

    /// Output pixels per frame pixel.
    pub fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    pub fn frame_to_crop(&self, b: &BoundingBox) -> BoundingBox {
        let (ox, oy) = self.origin();
        b.translate(-ox, -oy).scale(self.scale())
    }

    pub fn crop_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        let (ox, oy) = self.origin();
        b.scale(1.0 / self.scale()).translate(ox, oy)
    }

    pub fn crop_point_to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        let (ox, oy) = self.origin();
        (ox + x / self.scale(), oy + y / self.scale())
    }

    pub fn extract(&self, frame: &Frame) -> Frame {
        let (ox, oy) = self.origin();
        let step = self.side / self.out as f64;
        ImageBuffer::from_fn(self.out, self.out, |q, p| {
            let x = ox + (q as f64 + 0.5) * step;
            let y = oy + (p as f64 + 0.5) * step;
            Rgb(sample_bilinear(frame, x, y))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_box_mapping_round_trips() {
        let c = CropWindow::new(50.0, 40.0, 80.0, 352);
        let b = BoundingBox::new(45.0, 33.0, 10.0, 14.0).unwrap();
        let back = c.crop_to_frame(&c.frame_to_crop(&b));
        for (u, v) in [(b.x, back.x), (b.y, back.y), (b.w, back.w), (b.h, back.h)] {
            assert!((u - v).abs() < 1e-9);
        }
        let (cx, cy) = c.frame_to_crop(&b).center();
        assert!((cx - 176.0).abs() < 1e-9 && (cy - 176.0).abs() < 1e-9);
    }

    #[test]
    fn identity_crop_reproduces_frame() {
        let f = ImageBuffer::from_fn(8, 8, |x, y| Rgb([x as f32 / 8.0, y as f32 / 8.0, 0.5]));
        let c = CropWindow::new(4.0, 4.0, 8.0, 8);
        let g = c.extract(&f);
        for (a, b) in f.as_raw().iter().zip(g.as_raw()) {
            assert!((a - b).abs() < 1e-6);
        }
        let t = to_tensor(&f);
        assert_eq!(t.shape(), &[3, 8, 8]);
        assert!((t[[0, 2, 5]] - 5.0 / 8.0).abs() < 1e-7);
    }
}
