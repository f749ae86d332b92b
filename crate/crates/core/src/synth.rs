//! Seeded synthetic sequences of small textured sprites.
//!
//! A [`SynthScene`] fixes everything random up front (background texture,
//! colours, trajectories, camera jumps) so any frame can be rendered on
//! demand and rendering is a pure function of `(config, frame index)`.
//! Attribute flags are derived from what was actually rendered: scale
//! variation, fast motion and out-of-view from the emitted boxes, occlusion
//! from the per-frame visible fraction, the rest from the config.

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::dataset::{Attribute, AttributeVector, FrameAnnotation, FrameSource, SequenceRecord};
use crate::error::{Error, Result};
use crate::imaging::Frame;

/// Frames per second assumed for the one-second scale-variation window.
const FPS: usize = 30;
/// Illumination multipliers at or below these mark IV / LI.
const IV_DROP: f64 = 0.8;
const LI_DROP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    /// Constant velocity, reflected at the borders.
    Linear,
    /// Linear motion plus occasional camera jumps that shift the whole scene.
    Abrupt,
    /// Heading re-drawn a little every frame.
    Fast,
}

impl Motion {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Motion::Linear),
            "abrupt" => Some(Motion::Abrupt),
            "fast" => Some(Motion::Fast),
            _ => None,
        }
    }
}

/// An occluding bar sweeps across the target for `duration` frames out of
/// every `period`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub period: usize,
    pub duration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: (u32, u32),
    /// Sprite side in pixels.
    pub object_size: f64,
    pub motion: Motion,
    /// Pixels per frame.
    pub speed: f64,
    /// Motion-blur kernel radius in pixels; 0 disables blur.
    pub blur_strength: u32,
    pub occluder: Option<Occluder>,
    pub distractor_count: usize,
    /// Illumination multiplier reached at the last frame, in `(0, 1]`.
    pub illumination_drop: f64,
    pub frames: usize,
    pub seed: u64,
    /// Per-frame multiplicative size change.
    pub scale_rate: f64,
    /// Lets the sprite centre reach the border, so up to half of it leaves the image.
    pub allow_out_of_view: bool,
    /// Sprinkles target-coloured patches over the background.
    pub background_clutter: bool,
    pub class_label: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: (320, 240),
            object_size: 16.0,
            motion: Motion::Linear,
            speed: 2.0,
            blur_strength: 0,
            occluder: None,
            distractor_count: 0,
            illumination_drop: 1.0,
            frames: 60,
            seed: 0,
            scale_rate: 1.0,
            allow_out_of_view: false,
            background_clutter: false,
            class_label: "sprite".to_string(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.object_size.is_finite() && self.object_size >= 2.0) {
            return bad(format!("object_size must be >= 2, got {}", self.object_size));
        }
        if self.frames < 2 {
            return bad(format!("frames must be >= 2, got {}", self.frames));
        }
        if (w as f64) < 2.0 * self.object_size || (h as f64) < 2.0 * self.object_size {
            return bad(format!("image {w}x{h} too small for a {}px object", self.object_size));
        }
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return bad(format!("speed must be finite and >= 0, got {}", self.speed));
        }
        if !(self.illumination_drop > 0.0 && self.illumination_drop <= 1.0) {
            return bad(format!(
                "illumination_drop must lie in (0, 1], got {}",
                self.illumination_drop
            ));
        }
        if !(self.scale_rate.is_finite() && self.scale_rate > 0.0) {
            return bad(format!("scale_rate must be positive, got {}", self.scale_rate));
        }
        if let Some(o) = self.occluder {
            if o.period == 0 || o.duration == 0 || o.duration > o.period {
                return bad(format!("occluder needs 0 < duration <= period, got {o:?}"));
            }
        }
        Ok(())
    }
}

/// Frames plus the record describing them.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub record: SequenceRecord,
}

/// One rendered frame with the target's anti-aliased coverage before blur
/// and occlusion, row-major over the image.
pub struct RenderedFrame {
    pub frame: Frame,
    pub coverage: Vec<f32>,
}

#[derive(Clone, Debug)]
struct Track {
    centers: Vec<(f64, f64)>,
    sizes: Vec<f64>,
    velocity: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    config: SynthConfig,
    background: Vec<[f32; 3]>,
    bg_w: usize,
    bg_h: usize,
    bg_margin: usize,
    camera: Vec<(i64, i64)>,
    camera_jumps: usize,
    colors: [[f32; 3]; 2],
    target: Track,
    distractors: Vec<Track>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize, lo: f32, hi: f32) -> Vec<[f32; 3]> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let lattice: Vec<[f32; 3]> = (0..gw * gh)
        .map(|_| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)])
        .collect();
    let mut out = vec![[0.0; 3]; w * h];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (gy, ty) = (fy.floor() as usize, smoothstep(fy.fract()) as f32);
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (gx, tx) = (fx.floor() as usize, smoothstep(fx.fract()) as f32);
            let a = lattice[gy * gw + gx];
            let b = lattice[gy * gw + gx + 1];
            let c = lattice[(gy + 1) * gw + gx];
            let d = lattice[(gy + 1) * gw + gx + 1];
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * tx;
                let bot = c[k] + (d[k] - c[k]) * tx;
                out[y * w + x][k] = top + (bot - top) * ty;
            }
        }
    }
    out
}

/// Reflects `p` into `[lo, hi]`, flipping `v` on each bounce.
fn reflect(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    for _ in 0..8 {
        if *p < lo {
            *p = 2.0 * lo - *p;
            *v = -*v;
        } else if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
        } else {
            return;
        }
    }
    *p = p.clamp(lo, hi);
}

/// Exact overlap of pixel `[px, px+1] x [py, py+1]` with an axis-aligned square.
fn pixel_coverage(px: f64, py: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
    let ox = (x2.min(px + 1.0) - x1.max(px)).max(0.0);
    let oy = (y2.min(py + 1.0) - y1.max(py)).max(0.0);
    ox * oy
}

impl SynthScene {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (w, h) = (config.image_size.0 as usize, config.image_size.1 as usize);
        let n = config.frames;
        let s0 = config.object_size;

        let colors = {
            let bright = rng.gen_range(0..3);
            let mut a = [0.15f32; 3];
            a[bright] = rng.gen_range(0.85..1.0);
            a[(bright + 1) % 3] = rng.gen_range(0.5..0.9);
            let b = [
                rng.gen_range(0.0..0.1),
                rng.gen_range(0.0..0.1),
                rng.gen_range(0.0..0.1),
            ];
            [a, b]
        };

        // Camera jumps shift the background window and everything in the scene.
        let mut camera = Vec::with_capacity(n);
        let mut jumps = 0;
        let (mut camx, mut camy) = (0i64, 0i64);
        let max_jump = (2.0 * s0).ceil() as i64;
        let mut jump_offsets = vec![(0.0, 0.0); n];
        for (t, offset) in jump_offsets.iter_mut().enumerate() {
            if config.motion == Motion::Abrupt && t > 0 && rng.gen_bool(0.15) {
                let dx = rng.gen_range(-max_jump..=max_jump);
                let dy = rng.gen_range(-max_jump..=max_jump);
                camx += dx;
                camy += dy;
                *offset = (-(dx as f64), -(dy as f64));
                jumps += 1;
            }
            camera.push((camx, camy));
        }
        let span = camera
            .iter()
            .map(|(x, y)| x.unsigned_abs().max(y.unsigned_abs()) as usize)
            .max()
            .unwrap_or(0);
        let bg_margin = span + 1;
        let (bg_w, bg_h) = (w + 2 * bg_margin, h + 2 * bg_margin);
        let mut background = value_noise(&mut rng, bg_w, bg_h, 24, 0.25, 0.65);
        let detail = value_noise(&mut rng, bg_w, bg_h, 6, -0.08, 0.08);
        for (p, d) in background.iter_mut().zip(&detail) {
            for k in 0..3 {
                p[k] += d[k];
            }
        }
        if config.background_clutter {
            let patches = (bg_w * bg_h) / (s0 * s0 * 12.0).max(1.0) as usize;
            let side = (s0 * 0.5).max(2.0) as usize;
            for _ in 0..patches {
                let px = rng.gen_range(0..bg_w.saturating_sub(side).max(1));
                let py = rng.gen_range(0..bg_h.saturating_sub(side).max(1));
                for y in py..(py + side).min(bg_h) {
                    for x in px..(px + side).min(bg_w) {
                        let cell = ((x - px) * 2 / side + (y - py) * 2 / side) % 2;
                        background[y * bg_w + x] = colors[cell];
                    }
                }
            }
        }

        let make_track = |rng: &mut ChaCha8Rng, with_jumps: bool| {
            let lo_edge = if config.allow_out_of_view { 0.0 } else { s0 / 2.0 };
            let mut cx = rng.gen_range(s0..(w as f64 - s0));
            let mut cy = rng.gen_range(s0..(h as f64 - s0));
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (mut vx, mut vy) = (config.speed * angle.cos(), config.speed * angle.sin());
            let mut track = Track {
                centers: Vec::with_capacity(n),
                sizes: Vec::with_capacity(n),
                velocity: Vec::with_capacity(n),
            };
            let max_size = (w.min(h) as f64) / 2.0;
            for (t, jump) in jump_offsets.iter().enumerate() {
                let size = (s0 * config.scale_rate.powi(t as i32)).clamp(2.0, max_size);
                if t > 0 {
                    if config.motion == Motion::Fast {
                        let turn: f64 = rng.gen_range(-0.5..0.5);
                        let (c, s) = (turn.cos(), turn.sin());
                        (vx, vy) = (vx * c - vy * s, vx * s + vy * c);
                    }
                    cx += vx;
                    cy += vy;
                    if with_jumps {
                        cx += jump.0;
                        cy += jump.1;
                    }
                }
                let lo = if config.allow_out_of_view { lo_edge } else { size / 2.0 };
                reflect(&mut cx, &mut vx, lo, w as f64 - lo);
                reflect(&mut cy, &mut vy, lo, h as f64 - lo);
                track.centers.push((cx, cy));
                track.sizes.push(size);
                track.velocity.push((vx, vy));
            }
            track
        };
        let target = make_track(&mut rng, true);
        let distractors = (0..config.distractor_count)
            .map(|_| make_track(&mut rng, true))
            .collect();

        Ok(Self {
            config: config.clone(),
            background,
            bg_w,
            bg_h,
            bg_margin,
            camera,
            camera_jumps: jumps,
            colors,
            target,
            distractors,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.config.frames
    }

    pub fn is_empty(&self) -> bool {
        self.config.frames == 0
    }

    fn sprite_box(track: &Track, t: usize) -> BoundingBox {
        let (cx, cy) = track.centers[t];
        BoundingBox::from_center(cx, cy, track.sizes[t], track.sizes[t])
    }

    /// Ground-truth box: the sprite clipped to the image.
    pub fn target_box(&self, t: usize) -> BoundingBox {
        let (w, h) = self.config.image_size;
        Self::sprite_box(&self.target, t)
            .clip_to(w as f64, h as f64)
            .expect("sprite centre always stays inside the image")
    }

    fn illumination(&self, t: usize) -> f32 {
        let frac = t as f64 / (self.config.frames - 1) as f64;
        (1.0 - (1.0 - self.config.illumination_drop) * frac) as f32
    }

    /// Occluder bar `[x1, x2] x [y1, y2]` at frame `t`, if one is active.
    fn occluder_rect(&self, t: usize) -> Option<(f64, f64, f64, f64)> {
        let occ = self.config.occluder?;
        let phase = t % occ.period;
        let start = occ.period - occ.duration;
        if t < occ.period || phase < start {
            return None;
        }
        let k = phase - start;
        let sb = Self::sprite_box(&self.target, t);
        let bar_w = 1.5 * sb.w;
        let progress = (k as f64 + 0.5) / occ.duration as f64;
        let cx = sb.x - bar_w / 2.0 + progress * (sb.w + bar_w);
        Some((cx - bar_w / 2.0, sb.y - sb.h, cx + bar_w / 2.0, sb.bottom() + sb.h))
    }

    /// Fraction of the visible target box hidden by the occluder.
    pub fn occluded_fraction(&self, t: usize) -> f64 {
        let Some((x1, y1, x2, y2)) = self.occluder_rect(t) else {
            return 0.0;
        };
        let b = self.target_box(t);
        let ox = (x2.min(b.right()) - x1.max(b.x)).max(0.0);
        let oy = (y2.min(b.bottom()) - y1.max(b.y)).max(0.0);
        (ox * oy / b.area()).min(1.0)
    }

    fn texture(&self, u: f64, v: f64) -> [f32; 3] {
        // 2x2 checker in sprite-relative coordinates
        let cell = ((u * 2.0).floor() as i64 + (v * 2.0).floor() as i64).rem_euclid(2);
        self.colors[cell as usize]
    }

    /// Renders one sprite into an RGBA layer restricted to `region`.
    fn draw_sprite(&self, track: &Track, t: usize, layer: &mut [[f32; 4]], w: usize, h: usize) -> Vec<(usize, f32)> {
        let sb = Self::sprite_box(track, t);
        let mut touched = Vec::new();
        let x_lo = sb.x.floor().max(0.0) as usize;
        let y_lo = sb.y.floor().max(0.0) as usize;
        let x_hi = (sb.right().ceil() as usize).min(w);
        let y_hi = (sb.bottom().ceil() as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let cov = pixel_coverage(x as f64, y as f64, sb.x, sb.y, sb.right(), sb.bottom()) as f32;
                if cov <= 0.0 {
                    continue;
                }
                let u = ((x as f64 + 0.5 - sb.x) / sb.w).clamp(0.0, 0.999);
                let v = ((y as f64 + 0.5 - sb.y) / sb.h).clamp(0.0, 0.999);
                let c = self.texture(u, v);
                let px = &mut layer[y * w + x];
                // premultiplied "over"
                for k in 0..3 {
                    px[k] = c[k] * cov + px[k] * (1.0 - cov);
                }
                px[3] = cov + px[3] * (1.0 - cov);
                touched.push((y * w + x, cov));
            }
        }
        touched
    }

    fn motion_blur(&self, layer: &[[f32; 4]], w: usize, h: usize, dir: (f64, f64)) -> Vec<[f32; 4]> {
        let r = self.config.blur_strength as i64;
        let norm = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
        let (ux, uy) = if norm > 1e-9 {
            (dir.0 / norm, dir.1 / norm)
        } else {
            (1.0, 0.0)
        };
        let mut out = vec![[0.0f32; 4]; w * h];
        let taps = (2 * r + 1) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 4];
                for k in -r..=r {
                    let sx = (x as f64 + k as f64 * ux).round() as i64;
                    let sy = (y as f64 + k as f64 * uy).round() as i64;
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        let p = layer[sy as usize * w + sx as usize];
                        for c in 0..4 {
                            acc[c] += p[c];
                        }
                    }
                }
                for c in 0..4 {
                    out[y * w + x][c] = acc[c] / taps;
                }
            }
        }
        out
    }

    pub fn render(&self, t: usize) -> RenderedFrame {
        let (w, h) = (self.config.image_size.0 as usize, self.config.image_size.1 as usize);
        let (camx, camy) = self.camera[t];
        let ox = (self.bg_margin as i64 + camx) as usize;
        let oy = (self.bg_margin as i64 + camy) as usize;
        debug_assert!(ox + w <= self.bg_w && oy + h <= self.bg_h);

        let mut layer = vec![[0.0f32; 4]; w * h];
        for d in &self.distractors {
            self.draw_sprite(d, t, &mut layer, w, h);
        }
        let touched = self.draw_sprite(&self.target, t, &mut layer, w, h);
        let mut coverage = vec![0.0f32; w * h];
        for (i, c) in touched {
            coverage[i] = c;
        }
        if self.config.blur_strength > 0 {
            layer = self.motion_blur(&layer, w, h, self.target.velocity[t]);
        }
        let occ = self.occluder_rect(t);
        let light = self.illumination(t);
        let frame: Frame = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (xu, yu) = (x as usize, y as usize);
            let bg = self.background[(oy + yu) * self.bg_w + ox + xu];
            let fg = layer[yu * w + xu];
            let mut px = [0.0f32; 3];
            for k in 0..3 {
                px[k] = fg[k] + bg[k] * (1.0 - fg[3]);
            }
            if let Some((x1, y1, x2, y2)) = occ {
                let cov = pixel_coverage(x as f64, y as f64, x1, y1, x2, y2) as f32;
                for p in &mut px {
                    *p = 0.5 * cov + *p * (1.0 - cov);
                }
            }
            Rgb(px.map(|v| (v * light).clamp(0.0, 1.0)))
        });
        RenderedFrame { frame, coverage }
    }

    pub fn record(&self, name: &str) -> SequenceRecord {
        let size = self.config.image_size;
        let annotations: Vec<FrameAnnotation> = (0..self.len())
            .map(|t| FrameAnnotation::new(t, self.target_box(t), size))
            .collect();
        let mut record = SequenceRecord {
            name: name.to_string(),
            class_label: self.config.class_label.clone(),
            annotations,
            attributes: AttributeVector::default(),
            frame_source: FrameSource::Synthetic(Box::new(self.config.clone())),
        };
        record.attributes = self.attributes(&record.boxes());
        record
    }

    fn attributes(&self, boxes: &[BoundingBox]) -> AttributeVector {
        let cfg = &self.config;
        let mut a = AttributeVector::default();
        let sv = (0..boxes.len().saturating_sub(FPS)).any(|t| {
            let r = boxes[t + FPS].area() / boxes[t].area();
            !(0.5..=2.0).contains(&r)
        });
        a.set(Attribute::SV, sv);
        let fm = boxes.windows(2).any(|p| {
            let (ax, ay) = p[0].center();
            let (bx, by) = p[1].center();
            let size = p[0].area().sqrt();
            ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt() > size
        });
        a.set(Attribute::FM, fm);
        let ov = (0..self.len()).any(|t| Self::sprite_box(&self.target, t) != self.target_box(t));
        a.set(Attribute::OV, ov);
        a.set(Attribute::IV, cfg.illumination_drop < IV_DROP);
        a.set(Attribute::LI, cfg.illumination_drop <= LI_DROP);
        a.set(Attribute::CM, self.camera_jumps > 0);
        a.set(Attribute::AM, cfg.motion == Motion::Abrupt && self.camera_jumps > 0);
        a.set(Attribute::MB, cfg.blur_strength > 0);
        a.set(Attribute::BC, cfg.background_clutter);
        a.set(Attribute::SO, cfg.distractor_count > 0);
        let occluded: Vec<f64> = (0..self.len()).map(|t| self.occluded_fraction(t)).collect();
        a.set(Attribute::PO, occluded.iter().any(|&f| f > 0.0 && f < 1.0 - 1e-9));
        a.set(Attribute::FO, occluded.iter().any(|&f| f >= 1.0 - 1e-9));
        a
    }
}

/// Renders every frame and builds the matching record. Deterministic per seed.
pub fn generate_sequence(config: &SynthConfig) -> Result<SyntheticSequence> {
    generate_named(config, &format!("synth-{:016x}", config.seed))
}

pub fn generate_named(config: &SynthConfig, name: &str) -> Result<SyntheticSequence> {
    let scene = SynthScene::new(config)?;
    let frames = (0..scene.len()).map(|t| scene.render(t).frame).collect();
    Ok(SyntheticSequence {
        frames,
        record: scene.record(name),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::is_tiny;

    fn quick(cfg: SynthConfig) -> SynthConfig {
        SynthConfig { frames: 12, ..cfg }
    }

    #[test]
    fn tiny_sprite_sequences_are_tiny() {
        let cfg = SynthConfig {
            image_size: (640, 480),
            object_size: 16.0,
            ..quick(SynthConfig::default())
        };
        let seq = generate_sequence(&cfg).unwrap();
        assert!(is_tiny(&seq.record));
        assert_eq!(seq.frames.len(), 12);
        assert_eq!(seq.frames[0].dimensions(), (640, 480));
    }

    #[test]
    fn fast_motion_flag() {
        let cfg = SynthConfig {
            image_size: (640, 480),
            speed: 20.0,
            ..quick(SynthConfig::default())
        };
        let seq = generate_sequence(&cfg).unwrap();
        assert!(seq.record.attributes.has(Attribute::FM));
        let slow = generate_sequence(&quick(SynthConfig::default())).unwrap();
        assert!(!slow.record.attributes.has(Attribute::FM));
    }

    #[test]
    fn deterministic_pixels() {
        let cfg = SynthConfig {
            blur_strength: 2,
            distractor_count: 2,
            motion: Motion::Abrupt,
            ..quick(SynthConfig::default())
        };
        let a = generate_sequence(&cfg).unwrap();
        let b = generate_sequence(&cfg).unwrap();
        assert_eq!(a.record, b.record);
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.as_raw(), y.as_raw());
        }
        let other = generate_sequence(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other.frames[0].as_raw(), a.frames[0].as_raw());
    }

    #[test]
    fn config_flags() {
        let cfg = SynthConfig {
            frames: 40,
            blur_strength: 1,
            occluder: Some(Occluder {
                period: 20,
                duration: 8,
            }),
            distractor_count: 1,
            illumination_drop: 0.4,
            background_clutter: true,
            motion: Motion::Abrupt,
            seed: 3,
            ..SynthConfig::default()
        };
        let a = generate_sequence(&cfg).unwrap().record.attributes;
        for attr in [
            Attribute::MB,
            Attribute::PO,
            Attribute::FO,
            Attribute::SO,
            Attribute::IV,
            Attribute::LI,
            Attribute::BC,
            Attribute::CM,
            Attribute::AM,
        ] {
            assert!(a.has(attr), "{attr} missing");
        }
        let plain = generate_sequence(&quick(SynthConfig::default()))
            .unwrap()
            .record
            .attributes;
        assert_eq!(plain.active().count(), 0);
    }

    #[test]
    fn scale_variation_and_out_of_view() {
        let cfg = SynthConfig {
            frames: 40,
            scale_rate: 1.03,
            ..SynthConfig::default()
        };
        assert!(generate_sequence(&cfg).unwrap().record.attributes.has(Attribute::SV));
        let cfg = SynthConfig {
            frames: 200,
            speed: 6.0,
            allow_out_of_view: true,
            ..SynthConfig::default()
        };
        let seq = generate_sequence(&cfg).unwrap();
        assert!(seq.record.attributes.has(Attribute::OV));
        assert!(seq.record.validate().is_ok());
    }

    fn coverage_centroid(r: &RenderedFrame, w: usize) -> Option<(f64, f64)> {
        let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for (i, &c) in r.coverage.iter().enumerate() {
            let c = c as f64;
            m += c;
            sx += c * ((i % w) as f64 + 0.5);
            sy += c * ((i / w) as f64 + 0.5);
        }
        (m > 0.0).then(|| (sx / m, sy / m))
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn sprite_centroid_matches_box(
            seed in 0u64..1000,
            size in 3.0f64..24.0,
            speed in 0.0f64..12.0,
            ov in proptest::bool::ANY,
        ) {
            let cfg = SynthConfig {
                image_size: (96, 80),
                object_size: size,
                speed,
                frames: 24,
                seed,
                allow_out_of_view: ov,
                motion: Motion::Fast,
                ..SynthConfig::default()
            };
            let scene = SynthScene::new(&cfg).unwrap();
            for t in 0..scene.len() {
                let r = scene.render(t);
                let (cx, cy) = coverage_centroid(&r, 96).expect("sprite visible");
                let (bx, by) = scene.target_box(t).center();
                proptest::prop_assert!((cx - bx).abs() <= 0.5 && (cy - by).abs() <= 0.5,
                    "frame {t}: centroid ({cx}, {cy}) box centre ({bx}, {by})");
            }
        }
    }

    #[test]
    fn sprite_visible_without_occluder() {
        let cfg = SynthConfig {
            frames: 60,
            speed: 9.0,
            allow_out_of_view: true,
            illumination_drop: 0.5,
            ..SynthConfig::default()
        };
        let scene = SynthScene::new(&cfg).unwrap();
        for t in 0..scene.len() {
            let r = scene.render(t);
            let mass: f32 = r.coverage.iter().sum();
            assert!(
                mass >= 0.25 * (cfg.object_size * cfg.object_size) as f32 - 1e-3,
                "frame {t}"
            );
            assert_eq!(scene.occluded_fraction(t), 0.0);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig {
                object_size: 1.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                frames: 1,
                ..SynthConfig::default()
            },
            SynthConfig {
                illumination_drop: 0.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                occluder: Some(Occluder { period: 4, duration: 5 }),
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(generate_sequence(&cfg), Err(Error::Argument(_))));
        }
    }
}
