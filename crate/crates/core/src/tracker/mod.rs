//! Discriminative target model, probabilistic box regression and the online
//! tracking loop.
//!
//! Feature maps are stored channel-first, `[C, H, W]`. Feature cell `(i, j)`
//! covers crop pixels `[j, j + 1) * stride x [i, i + 1) * stride`, so its
//! centre sits at `((j + 0.5) * stride, (i + 0.5) * stride)`.

mod boxreg;
mod online;

use ndarray::{ArrayD, Ix2, IxDyn};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::{to_tensor, Frame};
use crate::model::{NetVars, TrackerNet};

pub use boxreg::{
    box_from_params, box_to_params, boxes_to_cells, full_kl_divergence, kl_loss_var, kl_regression_loss, label_density,
    predictive_density, prpool, BoxGrid, IoUHead, Refinement,
};
pub use online::{
    extract_crop_features, track_sequence, CropFeatures, TrackStats, Tracker, TrackerConfig, TrackerState,
};

/// Relative loss increase tolerated between optimizer steps.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[C, H, W]`.
    pub values: Tensor,
    /// Input pixels per cell.
    pub stride: f64,
}

impl FeatureMap {
    pub fn new(values: Tensor, stride: f64) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::Shape(format!(
                "feature map must be [C, H, W], got {:?}",
                values.shape()
            )));
        }
        if !(stride > 0.0) {
            return Err(Error::Argument(format!("stride must be positive, got {stride}")));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { values, stride })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    /// `[H, W]` in `[0, 1]`.
    pub values: Tensor,
    /// `(x, y)` in cell units.
    pub center: (f64, f64),
    pub sigma: f64,
}

impl LabelMap {
    /// Gaussian of width `sigma` cells centred at `center = (x, y)` cells.
    pub fn gaussian(height: usize, width: usize, center: (f64, f64), sigma: f64) -> Self {
        let values = ArrayD::from_shape_fn(IxDyn(&[height, width]), |d| {
            let dx = d[1] as f64 + 0.5 - center.0;
            let dy = d[0] as f64 + 0.5 - center.1;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        });
        Self { values, center, sigma }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    fn mask(&self, threshold: f64) -> Tensor {
        self.values.mapv(|v| if v > threshold { 1.0 } else { 0.0 })
    }
}

/// Training set of the target model: features, labels and importance weights.
#[derive(Clone, Debug)]
pub struct SampleMemory {
    entries: Vec<(FeatureMap, LabelMap, f64)>,
    capacity: usize,
    /// Entries below this index are never evicted.
    pinned: usize,
    pub mask_threshold: f64,
}

impl SampleMemory {
    pub fn new(capacity: usize, mask_threshold: f64) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        Self {
            entries: Vec::new(),
            capacity,
            pinned: 0,
            mask_threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Adds a sample; when full, the oldest unpinned entry is dropped.
    pub fn push(&mut self, x: FeatureMap, label: LabelMap, weight: f64) -> Result<()> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::Argument(format!("sample weight must be positive, got {weight}")));
        }
        let (h, w) = x.size();
        if label.size() != (h, w) {
            return Err(Error::Shape(format!(
                "label {:?} for features {:?}",
                label.size(),
                (h, w)
            )));
        }
        if self.entries.len() == self.capacity {
            if self.pinned >= self.capacity {
                return Ok(());
            }
            self.entries.remove(self.pinned);
        }
        self.entries.push((x, label, weight));
        Ok(())
    }

    /// Marks all current entries as permanent.
    pub fn pin_all(&mut self) {
        self.pinned = self.entries.len();
    }

    pub fn entries(&self) -> impl Iterator<Item = (&FeatureMap, &LabelMap, f64)> {
        self.entries.iter().map(|(x, l, w)| (x, l, *w))
    }

    /// Weights rescaled to sum to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|e| e.2).sum();
        self.entries.iter().map(|e| e.2 / total).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    /// `[1, C, k, k]`.
    pub filter: Tensor,
    pub lambda: f64,
}

impl TargetModel {
    pub fn zeros(channels: usize, size: usize, lambda: f64) -> Self {
        Self {
            filter: ArrayD::zeros(IxDyn(&[1, channels, size, size])),
            lambda,
        }
    }

    fn pad(&self) -> usize {
        self.filter.shape()[2] / 2
    }

    /// Score map `[H, W]` of `x ∗ f`, same padding.
    pub fn score(&self, x: &FeatureMap) -> Result<Tensor> {
        if x.channels() != self.filter.shape()[1] {
            return Err(Error::Shape(format!(
                "filter has {} channels, features have {}",
                self.filter.shape()[1],
                x.channels()
            )));
        }
        let s = crate::autograd::conv_forward(&x.values, &self.filter, 1, self.pad());
        let (h, w) = x.size();
        Ok(s.into_shape_with_order(IxDyn(&[h, w])).unwrap())
    }
}

/// `score - label` where the label exceeds `threshold`, `max(0, score)` elsewhere.
pub fn residual_hinge(score: &Tensor, label: &LabelMap, threshold: f64) -> Result<Tensor> {
    if score.shape() != label.values.shape() {
        return Err(Error::Shape(format!(
            "score {:?} vs label {:?}",
            score.shape(),
            label.values.shape()
        )));
    }
    let mut r = score.clone();
    ndarray::Zip::from(&mut r).and(&label.values).for_each(|s, &z| {
        *s = if z > threshold { *s - z } else { s.max(0.0) };
    });
    Ok(r)
}

/// Hinge residual of `score[1, H, W]` on the tape.
pub fn hinge_var(tape: &mut Tape, score: Var, label: &LabelMap, threshold: f64) -> Var {
    let shape = tape.shape(score).to_vec();
    let reshape = |t: Tensor| t.into_shape_with_order(IxDyn(&shape)).unwrap();
    let mask = label.mask(threshold);
    let inv = mask.mapv(|m| 1.0 - m);
    let z = tape.constant(reshape(label.values.clone()));
    let mask = tape.constant(reshape(mask));
    let inv = tape.constant(reshape(inv));
    let diff = tape.sub(score, z);
    let inside = tape.mul(diff, mask);
    let pos = tape.relu(score);
    let outside = tape.mul(pos, inv);
    tape.add(inside, outside)
}

/// Target-model problem on a tape: feature vars with labels and weights.
pub struct ModelProblem<'a> {
    pub features: &'a [Var],
    pub labels: &'a [&'a LabelMap],
    pub weights: &'a [f64],
    pub lambda: f64,
    pub mask_threshold: f64,
}

impl ModelProblem<'_> {
    fn pad(tape: &Tape, f: Var) -> usize {
        tape.shape(f)[2] / 2
    }

    fn residuals(&self, tape: &mut Tape, f: Var) -> Vec<Var> {
        let pad = Self::pad(tape, f);
        self.features
            .iter()
            .zip(self.labels)
            .map(|(&x, label)| {
                let s = tape.conv2d(x, f, None, 1, pad);
                hinge_var(tape, s, label, self.mask_threshold)
            })
            .collect()
    }

    /// `Σ w_j ‖r_j‖² + λ²‖f‖²`.
    pub fn loss(&self, tape: &mut Tape, f: Var) -> Var {
        let rs = self.residuals(tape, f);
        let mut terms = Vec::with_capacity(rs.len() + 1);
        for (r, &w) in rs.into_iter().zip(self.weights) {
            let sq = tape.sum_sq(r);
            terms.push(tape.scale(sq, w));
        }
        let reg = tape.sum_sq(f);
        terms.push(tape.scale(reg, self.lambda * self.lambda));
        tape.add_all(&terms)
    }

    /// One steepest-descent step with the step length that minimizes the
    /// quadratic majorizer along the negative gradient.
    ///
    /// For background cells `max(0, s)²` has curvature at most that of `s²`,
    /// so `L(f - a g) <= L(f) - a‖g‖² + a²(Σ w_j‖x_j ∗ g‖² + λ²‖g‖²)` and the
    /// step `a = ‖g‖² / (2(Σ w_j‖x_j ∗ g‖² + λ²‖g‖²))` never increases the loss.
    pub fn step(&self, tape: &mut Tape, f: Var) -> Var {
        let k = tape.shape(f)[2];
        let pad = Self::pad(tape, f);
        let lam2 = self.lambda * self.lambda;
        let rs = self.residuals(tape, f);
        let mut parts = Vec::with_capacity(rs.len() + 1);
        for ((&x, r), &w) in self.features.iter().zip(rs).zip(self.weights) {
            let c = tape.filter_correlation(x, r, (k, k), 1, pad);
            parts.push(tape.scale(c, 2.0 * w));
        }
        parts.push(tape.scale(f, 2.0 * lam2));
        let g = tape.add_all(&parts);
        let gg = tape.sum_sq(g);
        let mut curv = Vec::with_capacity(self.features.len() + 1);
        for (&x, &w) in self.features.iter().zip(self.weights) {
            let xg = tape.conv2d(x, g, None, 1, pad);
            let q = tape.sum_sq(xg);
            curv.push(tape.scale(q, w));
        }
        curv.push(tape.scale(gg, lam2));
        let q = tape.add_all(&curv);
        let (ggv, qv) = (tape.item(gg), tape.item(q));
        if !(ggv > 0.0 && qv > 0.0 && (ggv / qv).is_finite()) {
            return f;
        }
        let denom = tape.scale(q, 2.0);
        let alpha = tape.div(gg, denom);
        let delta = tape.scale_by(g, alpha);
        tape.sub(f, delta)
    }

    /// `[f0, f1, ..., f_n]`.
    pub fn iterates(&self, tape: &mut Tape, f0: Var, n_iter: usize) -> Vec<Var> {
        let mut out = Vec::with_capacity(n_iter + 1);
        out.push(f0);
        for _ in 0..n_iter {
            let next = self.step(tape, *out.last().unwrap());
            out.push(next);
        }
        out
    }
}

#[cfg(test)]
fn memory_on_tape(tape: &mut Tape, memory: &SampleMemory) -> (Vec<Var>, Vec<LabelMap>) {
    let xs = memory
        .entries()
        .map(|(x, _, _)| tape.constant(x.values.clone()))
        .collect();
    let labels = memory.entries().map(|(_, l, _)| l.clone()).collect();
    (xs, labels)
}

pub fn model_loss(f: &TargetModel, memory: &SampleMemory) -> Result<f64> {
    if memory.is_empty() {
        return Err(Error::Argument("model_loss needs a non-empty memory".into()));
    }
    let weights = memory.normalized_weights();
    let mut total = 0.0;
    for ((x, label, _), w) in memory.entries().zip(&weights) {
        let r = residual_hinge(&f.score(x)?, label, memory.mask_threshold)?;
        total += w * r.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total + f.lambda * f.lambda * f.filter.iter().map(|v| v * v).sum::<f64>())
}

#[derive(Clone, Debug)]
pub struct Optimized {
    pub model: TargetModel,
    /// Loss before the first step and after every step.
    pub losses: Vec<f64>,
}

/// Memory samples unrolled once into a row-major im2col matrix `[P, C k k]`,
/// one row per output cell of every sample, so each score is a short dot
/// product. Used on the non-differentiable path.
struct Unrolled {
    rows: Vec<f64>,
    dim: usize,
    labels: Vec<f64>,
    inside: Vec<bool>,
    /// Sample weight of each row.
    weights: Vec<f64>,
    lam2: f64,
}

impl Unrolled {
    fn new(memory: &SampleMemory, k: usize, lambda: f64) -> Self {
        let pad = k as isize / 2;
        let c = memory.entries().next().map_or(0, |e| e.0.channels());
        let dim = c * k * k;
        let (mut rows, mut labels, mut inside, mut weights) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for ((x, label, _), wj) in memory.entries().zip(memory.normalized_weights()) {
            let (h, w) = x.size();
            let xs = x.values.as_standard_layout();
            let xs = xs.as_slice().unwrap();
            for oy in 0..h {
                for ox in 0..w {
                    for ci in 0..c {
                        for ki in 0..k {
                            let iy = oy as isize + ki as isize - pad;
                            for kj in 0..k {
                                let ix = ox as isize + kj as isize - pad;
                                let inb = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                                rows.push(if inb {
                                    xs[(ci * h + iy as usize) * w + ix as usize]
                                } else {
                                    0.0
                                });
                            }
                        }
                    }
                }
            }
            for &v in label.values.iter() {
                labels.push(v);
                inside.push(v > memory.mask_threshold);
                weights.push(wj);
            }
        }
        Self {
            rows,
            dim,
            labels,
            inside,
            weights,
            lam2: lambda * lambda,
        }
    }

    fn row(&self, p: usize) -> &[f64] {
        &self.rows[p * self.dim..(p + 1) * self.dim]
    }

    /// Hinge residuals at `f` and the loss they imply.
    fn residual(&self, f: &[f64]) -> (Vec<f64>, f64) {
        let mut loss = self.lam2 * dot(f, f);
        let r: Vec<f64> = (0..self.labels.len())
            .map(|p| {
                let s = dot(self.row(p), f);
                let r = if self.inside[p] { s - self.labels[p] } else { s.max(0.0) };
                loss += self.weights[p] * r * r;
                r
            })
            .collect();
        (r, loss)
    }

    fn step(&self, f: &[f64], r: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = f.iter().map(|v| 2.0 * self.lam2 * v).collect();
        for (p, &rp) in r.iter().enumerate() {
            if rp != 0.0 {
                let a = 2.0 * self.weights[p] * rp;
                g.iter_mut().zip(self.row(p)).for_each(|(gi, x)| *gi += a * x);
            }
        }
        let gg = dot(&g, &g);
        let q = (0..self.labels.len())
            .map(|p| {
                let xg = dot(self.row(p), &g);
                self.weights[p] * xg * xg
            })
            .sum::<f64>()
            + self.lam2 * gg;
        if !(gg > 0.0 && q > 0.0 && (gg / q).is_finite()) {
            return f.to_vec();
        }
        let alpha = gg / (2.0 * q);
        f.iter().zip(&g).map(|(fi, gi)| fi - alpha * gi).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `n_iter` majorizer steps from `f0`; errors if the loss ever rises.
pub fn optimize_target_model(f0: &TargetModel, memory: &SampleMemory, n_iter: usize) -> Result<Optimized> {
    if memory.is_empty() {
        return Err(Error::Argument("cannot optimize on an empty memory".into()));
    }
    let c = f0.filter.shape()[1];
    let k = f0.filter.shape()[2];
    for (x, _, _) in memory.entries() {
        if x.channels() != c {
            return Err(Error::Shape(format!(
                "filter has {c} channels, features have {}",
                x.channels()
            )));
        }
    }
    let problem = Unrolled::new(memory, k, f0.lambda);
    let mut f: Vec<f64> = f0.filter.iter().copied().collect();
    let (mut r, l0) = problem.residual(&f);
    let mut losses = vec![l0];
    for i in 0..n_iter {
        f = problem.step(&f, &r);
        let (next, cur) = problem.residual(&f);
        let prev = *losses.last().unwrap();
        if !cur.is_finite() {
            return Err(Error::NonFinite(format!("target-model loss at step {}", i + 1)));
        }
        if cur > prev + DIVERGENCE_TOLERANCE * prev.abs().max(1.0) {
            return Err(Error::Divergence(format!(
                "target-model loss rose from {prev} to {cur} at step {}",
                i + 1
            )));
        }
        r = next;
        losses.push(cur);
    }
    Ok(Optimized {
        model: TargetModel {
            filter: ArrayD::from_shape_vec(IxDyn(f0.filter.shape()), f).unwrap(),
            lambda: f0.lambda,
        },
        losses,
    })
}

/// `Σ_i Σ_test ‖r(x ∗ f_i, z)‖²` over iterates `f_0..f_N`, divided by
/// `max(N, 1)`. With a single iterate the divisor is one.
pub fn classification_loss_var(
    tape: &mut Tape,
    iterates: &[Var],
    test: &[(Var, &LabelMap)],
    mask_threshold: f64,
) -> Var {
    assert!(!iterates.is_empty() && !test.is_empty());
    let mut terms = Vec::with_capacity(iterates.len() * test.len());
    for &f in iterates {
        let pad = tape.shape(f)[2] / 2;
        for &(x, label) in test {
            let s = tape.conv2d(x, f, None, 1, pad);
            let r = hinge_var(tape, s, label, mask_threshold);
            terms.push(tape.sum_sq(r));
        }
    }
    let total = tape.add_all(&terms);
    tape.scale(total, 1.0 / (iterates.len() - 1).max(1) as f64)
}

pub fn classification_loss(
    iterates: &[TargetModel],
    test_set: &[(FeatureMap, LabelMap)],
    mask_threshold: f64,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::Argument("classification loss needs test samples".into()));
    }
    if iterates.is_empty() {
        return Err(Error::Argument("classification loss needs at least one iterate".into()));
    }
    let mut total = 0.0;
    for f in iterates {
        for (x, label) in test_set {
            let r = residual_hinge(&f.score(x)?, label, mask_threshold)?;
            total += r.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(total / (iterates.len() - 1).max(1) as f64)
}

/// Backbone features of a network-sized image.
pub fn extract_features(net: &TrackerNet, image: &Frame) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let v = net.bind_frozen(&mut tape);
    let x = tape.constant(to_tensor(image));
    let f = net.backbone(&mut tape, &v, x)?;
    FeatureMap::new(tape.value(f).clone(), crate::model::STRIDE as f64)
}

/// Score map as a 2-d view helper for peak search.
pub(crate) fn as_grid(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("2-d score map")
}

/// Both feature levels of one image on a tape.
pub(crate) fn features_on_tape(net: &TrackerNet, tape: &mut Tape, v: &NetVars, image: Tensor) -> Result<(Var, Var)> {
    let x = tape.constant(image);
    let feat = net.backbone(tape, v, x)?;
    let cls = net.cls_features(tape, v, feat);
    Ok((feat, cls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(
            ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.gen_range(-1.0..1.0)),
            16.0,
        )
        .unwrap()
    }

    #[test]
    fn hinge_examples() {
        let label = LabelMap {
            values: ArrayD::from_elem(IxDyn(&[2, 2]), 0.7),
            center: (1.0, 1.0),
            sigma: 1.0,
        };
        let r = residual_hinge(&label.values, &label, 0.05).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
        let bg = LabelMap {
            values: ArrayD::zeros(IxDyn(&[1, 2])),
            center: (0.0, 0.0),
            sigma: 1.0,
        };
        let s = ndarray::arr2(&[[-3.0, 2.0]]).into_dyn();
        assert_eq!(
            residual_hinge(&s, &bg, 0.05).unwrap(),
            ndarray::arr2(&[[0.0, 2.0]]).into_dyn()
        );
        assert!(residual_hinge(&ArrayD::zeros(IxDyn(&[2, 3])), &bg, 0.05).is_err());
    }

    #[test]
    fn gaussian_label_peaks_at_center() {
        let l = LabelMap::gaussian(22, 22, (7.5, 12.5), 1.0);
        let (mut best, mut at) = (0.0, (0, 0));
        for ((i, j), &v) in as_grid(&l.values).indexed_iter() {
            if v > best {
                best = v;
                at = (i, j);
            }
        }
        assert_eq!(at, (12, 7));
        assert_eq!(best, 1.0);
    }

    #[test]
    fn model_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mem = SampleMemory::new(10, 0.05);
        let zero = TargetModel::zeros(4, 3, 0.5);
        mem.push(
            random_map(&mut rng, 4, 6, 6),
            LabelMap {
                values: ArrayD::zeros(IxDyn(&[6, 6])),
                center: (0.0, 0.0),
                sigma: 1.0,
            },
            1.0,
        )
        .unwrap();
        assert_eq!(model_loss(&zero, &mem).unwrap(), 0.0);

        let labels: Vec<_> = (0..3)
            .map(|i| LabelMap::gaussian(6, 6, (1.0 + i as f64, 3.0), 1.0))
            .collect();
        let mut mem = SampleMemory::new(10, 0.05);
        for l in &labels {
            mem.push(random_map(&mut rng, 4, 6, 6), l.clone(), 1.0).unwrap();
        }
        let expect: f64 = labels
            .iter()
            .map(|l| l.values.iter().filter(|&&z| z > 0.05).map(|z| z * z).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        assert_relative_eq!(model_loss(&zero, &mem).unwrap(), expect, epsilon = 1e-12);

        let f = TargetModel {
            filter: ArrayD::from_elem(IxDyn(&[1, 4, 3, 3]), 0.2),
            lambda: 0.3,
        };
        let f2 = TargetModel {
            lambda: 0.6,
            ..f.clone()
        };
        let data = model_loss(
            &TargetModel {
                lambda: 0.0,
                ..f.clone()
            },
            &mem,
        )
        .unwrap();
        let (r1, r2) = (
            model_loss(&f, &mem).unwrap() - data,
            model_loss(&f2, &mem).unwrap() - data,
        );
        assert_relative_eq!(r2, 4.0 * r1, epsilon = 1e-9);
    }

    #[test]
    fn optimizer_zero_iters_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mem = SampleMemory::new(10, 0.05);
        for i in 0..4 {
            mem.push(
                random_map(&mut rng, 3, 8, 8),
                LabelMap::gaussian(8, 8, (2.0 + i as f64, 4.0), 1.0),
                1.0,
            )
            .unwrap();
        }
        let f0 = TargetModel::zeros(3, 3, 0.1);
        let out = optimize_target_model(&f0, &mem, 0).unwrap();
        assert_eq!(out.model, f0);
        let out = optimize_target_model(&f0, &mem, 20).unwrap();
        assert!(out.losses.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert!(out.losses[1] < out.losses[0] && out.losses[20] < out.losses[1]);
        assert!(optimize_target_model(&f0, &SampleMemory::new(2, 0.05), 3).is_err());
    }

    #[test]
    fn classification_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_map(&mut rng, 2, 5, 5);
        let f = TargetModel {
            filter: ArrayD::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |_| rng.gen_range(-1.0..1.0)),
            lambda: 0.0,
        };
        let s = f.score(&x).unwrap();
        let zero = TargetModel::zeros(2, 3, 0.0);
        let empty = LabelMap {
            values: ArrayD::zeros(IxDyn(&[5, 5])),
            center: (0.0, 0.0),
            sigma: 1.0,
        };
        assert_eq!(
            classification_loss(&[zero.clone(), zero], &[(x.clone(), empty)], 0.05).unwrap(),
            0.0
        );

        let label = LabelMap::gaussian(5, 5, (2.5, 2.5), 1.0);
        let one = classification_loss(&[f.clone()], &[(x.clone(), label.clone())], 0.05).unwrap();
        let r = residual_hinge(&s, &label, 0.05).unwrap();
        assert_relative_eq!(one, r.iter().map(|v| v * v).sum::<f64>(), epsilon = 1e-12);

        let g = TargetModel {
            filter: f.filter.mapv(|v| -v),
            lambda: 0.0,
        };
        let a = classification_loss(&[f.clone()], &[(x.clone(), label.clone())], 0.05).unwrap();
        let b = classification_loss(&[g.clone()], &[(x.clone(), label.clone())], 0.05).unwrap();
        let both = classification_loss(&[f, g], &[(x, label)], 0.05).unwrap();
        assert_relative_eq!(both, a + b, epsilon = 1e-12);
        assert!(classification_loss(&[], &[], 0.05).is_err());
    }

    #[test]
    fn unrolled_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mem = SampleMemory::new(10, 0.05);
        for i in 0..3 {
            mem.push(
                random_map(&mut rng, 3, 7, 7),
                LabelMap::gaussian(7, 7, (2.0 + i as f64, 3.5), 1.0),
                1.0 + i as f64,
            )
            .unwrap();
        }
        let f0 = TargetModel {
            filter: ArrayD::from_shape_fn(IxDyn(&[1, 3, 3, 3]), |_| rng.gen_range(-0.3..0.3)),
            lambda: 0.2,
        };
        let fast = optimize_target_model(&f0, &mem, 4).unwrap();

        let mut tape = Tape::new();
        let (xs, labels) = memory_on_tape(&mut tape, &mem);
        let refs: Vec<&LabelMap> = labels.iter().collect();
        let weights = mem.normalized_weights();
        let problem = ModelProblem {
            features: &xs,
            labels: &refs,
            weights: &weights,
            lambda: 0.2,
            mask_threshold: 0.05,
        };
        let f = tape.constant(f0.filter.clone());
        let its = problem.iterates(&mut tape, f, 4);
        for (i, &fi) in its.iter().enumerate() {
            let l = problem.loss(&mut tape, fi);
            assert_relative_eq!(tape.item(l), fast.losses[i], max_relative = 1e-10);
        }
        for (a, b) in tape.value(its[4]).iter().zip(fast.model.filter.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10);
        }
    }
}
