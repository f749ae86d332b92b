use image::imageops;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::imaging::{to_tensor, CropWindow, Frame};
use crate::metrics::TrackResult;
use crate::model::{TrackerNet, STRIDE};
use crate::tracker::{
    as_grid, features_on_tape, optimize_target_model, FeatureMap, IoUHead, LabelMap, SampleMemory, TargetModel,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Crop side as a multiple of the box's geometric-mean side.
    pub search_area_factor: f64,
    pub init_samples: usize,
    pub init_iters: usize,
    pub update_iters: usize,
    /// Frames between scheduled target-model updates.
    pub update_interval: usize,
    /// Secondary peak / main peak ratio that counts as interference.
    pub interference_ratio: f64,
    /// Cells around the main peak ignored when searching for interference.
    pub interference_radius: f64,
    pub memory_capacity: usize,
    pub refine_steps: usize,
    pub refine_step: f64,
    /// Largest per-frame change of width or height, as a ratio.
    pub max_scale_change: f64,
    pub min_box_side: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search_area_factor: 5.0,
            init_samples: 15,
            init_iters: 10,
            update_iters: 5,
            update_interval: 20,
            interference_ratio: 0.5,
            interference_radius: 3.0,
            memory_capacity: 50,
            refine_steps: 10,
            refine_step: 1.0,
            max_scale_change: 1.1,
            min_box_side: 2.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.search_area_factor > 1.0) || self.init_samples == 0 || self.update_interval == 0 {
            return Err(Error::Argument(
                "search_area_factor must exceed 1; init_samples and update_interval must be positive".into(),
            ));
        }
        if self.memory_capacity < self.init_samples {
            return Err(Error::Argument("memory_capacity must hold the initial samples".into()));
        }
        if !(self.max_scale_change >= 1.0) || !(self.refine_step > 0.0) {
            return Err(Error::Argument(
                "max_scale_change must be >= 1 and refine_step > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackStats {
    pub frames: usize,
    pub scheduled_updates: usize,
    pub interference_updates: usize,
    /// Frames where processing failed and the previous box was repeated.
    pub fallbacks: usize,
}

/// Features of one search crop.
#[derive(Clone, Debug)]
pub struct CropFeatures {
    pub window: CropWindow,
    pub feat: FeatureMap,
    pub cls: FeatureMap,
}

fn image_features(net: &TrackerNet, image: &Frame) -> Result<(FeatureMap, FeatureMap)> {
    let mut tape = Tape::new();
    let v = net.bind_frozen(&mut tape);
    let (feat, cls) = features_on_tape(net, &mut tape, &v, to_tensor(image))?;
    let s = STRIDE as f64;
    Ok((
        FeatureMap::new(tape.value(feat).clone(), s)?,
        FeatureMap::new(tape.value(cls).clone(), s)?,
    ))
}

pub fn extract_crop_features(net: &TrackerNet, frame: &Frame, window: CropWindow) -> Result<CropFeatures> {
    let (feat, cls) = image_features(net, &window.extract(frame))?;
    Ok(CropFeatures { window, feat, cls })
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub target_model: TargetModel,
    pub memory: SampleMemory,
    pub last_box: BoundingBox,
    pub frames_since_update: usize,
    pub stats: TrackStats,
    modulation: crate::autograd::Tensor,
}

pub struct Tracker<'a> {
    pub net: &'a TrackerNet,
    pub config: TrackerConfig,
}

enum Augment {
    Identity,
    Flip,
    Blur(f32),
    /// Window shift in units of the crop side.
    Shift(f64, f64),
}

fn augmentations(n: usize) -> Vec<Augment> {
    let mut out = vec![Augment::Identity, Augment::Flip, Augment::Blur(1.0), Augment::Blur(2.0)];
    let mut ring = 0;
    while out.len() < n {
        let (count, radius) = if ring == 0 {
            (8, 1.0 / 8.0)
        } else {
            (3 + ring, (ring as f64 + 1.0) / 10.0)
        };
        for k in 0..count {
            let a = std::f64::consts::TAU * (k as f64 + 0.5 * ring as f64) / count as f64;
            out.push(Augment::Shift(radius * a.cos(), radius * a.sin()));
        }
        ring += 1;
    }
    out.truncate(n);
    out
}

impl<'a> Tracker<'a> {
    pub fn new(net: &'a TrackerNet, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { net, config })
    }

    fn window(&self, b: &BoundingBox) -> CropWindow {
        let (cx, cy) = b.center();
        let side = self.config.search_area_factor * (b.w * b.h).sqrt();
        CropWindow::new(cx, cy, side, self.net.config.input_size as u32)
    }

    fn label(&self, center_px: (f64, f64)) -> LabelMap {
        let n = self.net.config.feature_size();
        let s = STRIDE as f64;
        LabelMap::gaussian(n, n, (center_px.0 / s, center_px.1 / s), self.net.config.label_sigma)
    }

    pub fn initialize(&self, frame: &Frame, init: &BoundingBox) -> Result<TrackerState> {
        init.validate()?;
        let window = self.window(init);
        let crop = window.extract(frame);
        let n = self.net.config.input_size as f64;
        let target = window.frame_to_crop(init);
        let (feat0, _) = image_features(self.net, &crop)?;
        let modulation = IoUHead::new(self.net).modulation(&feat0, &target)?;

        let mut memory = SampleMemory::new(self.config.memory_capacity, self.net.config.mask_threshold);
        let (tcx, tcy) = target.center();
        for aug in augmentations(self.config.init_samples) {
            let (img, center) = match aug {
                Augment::Identity => (crop.clone(), (tcx, tcy)),
                Augment::Flip => (imageops::flip_horizontal(&crop), (n - tcx, tcy)),
                Augment::Blur(sigma) => (imageops::blur(&crop, sigma), (tcx, tcy)),
                Augment::Shift(dx, dy) => {
                    let w = CropWindow::new(
                        window.cx + dx * window.side,
                        window.cy + dy * window.side,
                        window.side,
                        window.out,
                    );
                    let c = w.frame_to_crop(init).center();
                    (w.extract(frame), c)
                }
            };
            let (_, cls) = image_features(self.net, &img)?;
            memory.push(cls, self.label(center), 1.0)?;
        }
        memory.pin_all();
        let f0 = TargetModel::zeros(
            self.net.config.channels,
            self.net.config.filter_size,
            self.net.config.lambda,
        );
        let target_model = optimize_target_model(&f0, &memory, self.config.init_iters)?.model;
        Ok(TrackerState {
            target_model,
            memory,
            last_box: *init,
            // the initial frame opens the first update interval
            frames_since_update: 1,
            stats: TrackStats {
                frames: 1,
                ..TrackStats::default()
            },
            modulation,
        })
    }

    /// Main peak `(row, col, value)` and whether a distinct local maximum
    /// outside the exclusion radius exceeds `ratio` times it.
    pub fn find_peaks(&self, score: &crate::autograd::Tensor) -> ((usize, usize, f64), bool) {
        let g = as_grid(score);
        let (h, w) = g.dim();
        let mut best = (0, 0, f64::NEG_INFINITY);
        for ((i, j), &v) in g.indexed_iter() {
            if v > best.2 {
                best = (i, j, v);
            }
        }
        if best.2 <= 0.0 {
            return (best, false);
        }
        let r2 = self.config.interference_radius.powi(2);
        let mut interference = false;
        for ((i, j), &v) in g.indexed_iter() {
            let d2 = (i as f64 - best.0 as f64).powi(2) + (j as f64 - best.1 as f64).powi(2);
            if d2 <= r2 || v <= self.config.interference_ratio * best.2 {
                continue;
            }
            let local_max = (i.saturating_sub(1)..(i + 2).min(h))
                .flat_map(|a| (j.saturating_sub(1)..(j + 2).min(w)).map(move |b| (a, b)))
                .all(|(a, b)| g[[a, b]] <= v);
            if local_max {
                interference = true;
                break;
            }
        }
        (best, interference)
    }

    fn estimate(&self, state: &TrackerState, cf: &CropFeatures) -> Result<(BoundingBox, bool)> {
        let score = state.target_model.score(&cf.cls)?;
        let ((pi, pj, _), interference) = self.find_peaks(&score);
        let s = STRIDE as f64;
        let last = cf.window.frame_to_crop(&state.last_box);
        let peak = ((pj as f64 + 0.5) * s, (pi as f64 + 0.5) * s);
        let head = IoUHead::new(self.net);
        let mut best: Option<(BoundingBox, f64)> = None;
        for k in [1.0, 0.9, 1.1] {
            let cand = BoundingBox::from_center(peak.0, peak.1, last.w * k, last.h * k);
            let r = head.refine(
                &state.modulation,
                &cf.feat,
                &cand,
                self.config.refine_steps,
                self.config.refine_step,
            )?;
            if best.as_ref().is_none_or(|b| r.score > b.1) {
                best = Some((r.bbox, r.score));
            }
        }
        let found = cf.window.crop_to_frame(&best.unwrap().0);
        Ok((found, interference))
    }

    fn constrain(&self, b: BoundingBox, last: &BoundingBox, frame: &Frame) -> BoundingBox {
        let m = self.config.max_scale_change;
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        let w = b.w.clamp(last.w / m, last.w * m).max(self.config.min_box_side).min(fw);
        let h = b.h.clamp(last.h / m, last.h * m).max(self.config.min_box_side).min(fh);
        let (cx, cy) = b.center();
        BoundingBox::from_center(cx.clamp(0.0, fw), cy.clamp(0.0, fh), w, h)
    }

    fn update(&self, state: &mut TrackerState) {
        if let Ok(out) = optimize_target_model(&state.target_model, &state.memory, self.config.update_iters) {
            state.target_model = out.model;
        }
        state.frames_since_update = 0;
    }

    /// Processes one frame. Never fails: on an internal error the previous
    /// box is repeated and counted as a fallback.
    pub fn track_frame(&self, state: &mut TrackerState, frame: &Frame) -> BoundingBox {
        state.stats.frames += 1;
        let window = self.window(&state.last_box);
        let step = extract_crop_features(self.net, frame, window).and_then(|cf| {
            let (found, interference) = self.estimate(state, &cf)?;
            let b = self.constrain(found, &state.last_box, frame);
            let center = cf.window.frame_to_crop(&b).center();
            state.memory.push(cf.cls, self.label(center), 1.0)?;
            Ok((b, interference))
        });
        let interference = match step {
            Ok((b, i)) => {
                state.last_box = b;
                i
            }
            Err(_) => {
                state.stats.fallbacks += 1;
                false
            }
        };
        state.frames_since_update += 1;
        if interference {
            state.stats.interference_updates += 1;
            self.update(state);
        } else if state.frames_since_update >= self.config.update_interval {
            state.stats.scheduled_updates += 1;
            self.update(state);
        }
        state.last_box
    }
}

/// One-pass evaluation run: the first output box is `init` exactly.
pub fn track_sequence(
    net: &TrackerNet,
    config: &TrackerConfig,
    frames: &[Frame],
    init: &BoundingBox,
    tracker_name: &str,
    sequence_name: &str,
) -> Result<(TrackResult, TrackStats)> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Argument("no frames to track".into()))?;
    let tracker = Tracker::new(net, config.clone())?;
    let mut state = tracker.initialize(first, init)?;
    let mut boxes = Vec::with_capacity(frames.len());
    boxes.push(*init);
    for f in &frames[1..] {
        boxes.push(tracker.track_frame(&mut state, f));
    }
    Ok((TrackResult::new(tracker_name, sequence_name, boxes), state.stats))
}
