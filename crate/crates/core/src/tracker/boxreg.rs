//! Probabilistic box regression on a uniform grid of box offsets.
//!
//! A box `b` is expressed relative to a reference box `r` as
//! `y = ((cx_b - cx_r) / w_r, (cy_b - cy_r) / h_r, ln(w_b / w_r), ln(h_b / h_r))`.
//! Densities over `y` are represented by their values at grid points, and
//! integrals become sums times the grid cell volume.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::autograd::{Tape, Tensor, Var};
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::model::{NetVars, TrackerNet};
use crate::tracker::FeatureMap;

pub fn box_to_params(b: &BoundingBox, reference: &BoundingBox) -> [f64; 4] {
    let (cx, cy) = b.center();
    let (rx, ry) = reference.center();
    [
        (cx - rx) / reference.w,
        (cy - ry) / reference.h,
        (b.w / reference.w).ln(),
        (b.h / reference.h).ln(),
    ]
}

pub fn box_from_params(y: &[f64; 4], reference: &BoundingBox) -> BoundingBox {
    let (rx, ry) = reference.center();
    BoundingBox::from_center(
        rx + y[0] * reference.w,
        ry + y[1] * reference.h,
        reference.w * y[2].exp(),
        reference.h * y[3].exp(),
    )
}

/// `[K, 4]` of `(x1, y1, x2, y2)` in cell units.
pub fn boxes_to_cells(boxes: &[BoundingBox], stride: f64) -> Tensor {
    let mut t = Array2::zeros((boxes.len(), 4));
    for (k, b) in boxes.iter().enumerate() {
        t[[k, 0]] = b.x / stride;
        t[[k, 1]] = b.y / stride;
        t[[k, 2]] = b.right() / stride;
        t[[k, 3]] = b.bottom() / stride;
    }
    t.into_dyn()
}

/// Pooled `[C, bins, bins]` features of a box given in input pixels.
pub fn prpool(feat: &FeatureMap, b: &BoundingBox, bins: usize) -> Result<Tensor> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::Degenerate(format!("cannot pool a {}x{} box", b.w, b.h)));
    }
    if bins == 0 {
        return Err(Error::Argument("bins must be positive".into()));
    }
    let mut tape = Tape::new();
    let f = tape.constant(feat.values.clone());
    let boxes = tape.constant(boxes_to_cells(&[*b], feat.stride));
    let out = tape.prpool(f, boxes, bins, 4);
    let c = feat.channels();
    Ok(tape
        .value(out)
        .clone()
        .into_shape_with_order(IxDyn(&[c, bins, bins]))
        .unwrap())
}

/// Uniform `points^4` grid of offsets around a proposal box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxGrid {
    pub proposal: BoundingBox,
    pub points: usize,
    pub half_range: f64,
    offsets: Vec<[f64; 4]>,
}

impl BoxGrid {
    pub fn new(proposal: BoundingBox, points: usize, half_range: f64) -> Result<Self> {
        if points < 2 || !(half_range > 0.0 && half_range.is_finite()) {
            return Err(Error::Argument(format!(
                "box grid needs >= 2 points per axis and a positive range, got {points} and {half_range}"
            )));
        }
        proposal.validate()?;
        let step = 2.0 * half_range / (points - 1) as f64;
        let axis: Vec<f64> = (0..points).map(|i| -half_range + step * i as f64).collect();
        let mut offsets = Vec::with_capacity(points.pow(4));
        for &a in &axis {
            for &b in &axis {
                for &c in &axis {
                    for &d in &axis {
                        offsets.push([a, b, c, d]);
                    }
                }
            }
        }
        Ok(Self {
            proposal,
            points,
            half_range,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_range / (self.points - 1) as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(4)
    }

    pub fn offsets(&self) -> &[[f64; 4]] {
        &self.offsets
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.offsets
            .iter()
            .map(|y| box_from_params(y, &self.proposal))
            .collect()
    }
}

/// Isotropic Gaussian in offset space around `gt`, normalized so that
/// `Σ p · cell_volume = 1` on the grid.
pub fn label_density(grid: &BoxGrid, gt: &BoundingBox, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Degenerate(format!("label sigma must be positive, got {sigma}")));
    }
    gt.validate()?;
    let mu = box_to_params(gt, &grid.proposal);
    let logp: Vec<f64> = grid
        .offsets()
        .iter()
        .map(|y| -(0..4).map(|k| (y[k] - mu[k]).powi(2)).sum::<f64>() / (2.0 * sigma * sigma))
        .collect();
    let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logp.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = unnorm.iter().sum::<f64>() * grid.cell_volume();
    // A label centred far outside the grid leaves essentially one nonzero point.
    if !(z.is_finite() && z > 0.0) || m < -50.0 {
        return Err(Error::Degenerate("label distribution has no mass on the grid".into()));
    }
    Ok(unnorm.into_iter().map(|u| u / z).collect())
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Argument("empty score grid".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("box score {s}")));
    }
    Ok(())
}

/// `exp(s) / Z` with `Z = Σ exp(s) · cell_volume`.
pub fn predictive_density(scores: &[f64], cell_volume: f64) -> Result<Vec<f64>> {
    check_scores(scores)?;
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z = e.iter().sum::<f64>() * cell_volume;
    Ok(e.into_iter().map(|v| v / z).collect())
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(Σ exp(s) Δy) - Σ s p Δy`: KL divergence from the label up to the
/// label's constant entropy.
pub fn kl_regression_loss(scores: &[f64], label: &[f64], cell_volume: f64) -> Result<f64> {
    check_scores(scores)?;
    if scores.len() != label.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} label values",
            scores.len(),
            label.len()
        )));
    }
    let cross: f64 = scores.iter().zip(label).map(|(s, p)| s * p).sum::<f64>() * cell_volume;
    Ok(logsumexp(scores) + cell_volume.ln() - cross)
}

/// The loss above plus `Σ p ln p Δy`; non-negative.
pub fn full_kl_divergence(scores: &[f64], label: &[f64], cell_volume: f64) -> Result<f64> {
    let neg_entropy: f64 = label.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>() * cell_volume;
    Ok(kl_regression_loss(scores, label, cell_volume)? + neg_entropy)
}

/// Tape version of [`kl_regression_loss`] for `scores[K]`.
pub fn kl_loss_var(tape: &mut Tape, scores: Var, label: &[f64], cell_volume: f64) -> Var {
    let lse = tape.logsumexp(scores);
    let w = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[label.len()]), label.iter().map(|p| p * cell_volume).collect()).unwrap(),
    );
    let weighted = tape.mul(scores, w);
    let cross = tape.sum(weighted);
    let diff = tape.sub(lse, cross);
    tape.add_const(diff, cell_volume.ln())
}

/// Read-only view of a network's IoU head.
#[derive(Clone, Copy)]
pub struct IoUHead<'a> {
    pub net: &'a TrackerNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub bbox: BoundingBox,
    pub score: f64,
    /// Score after each ascent step, starting with the initial box.
    pub history: Vec<f64>,
}

impl<'a> IoUHead<'a> {
    pub fn new(net: &'a TrackerNet) -> Self {
        Self { net }
    }

    fn frozen(&self) -> (Tape, NetVars) {
        let mut tape = Tape::new();
        let v = self.net.bind_frozen(&mut tape);
        (tape, v)
    }

    /// Modulation vector from the reference frame's features and box (pixels).
    pub fn modulation(&self, ref_feat: &FeatureMap, ref_box: &BoundingBox) -> Result<Tensor> {
        ref_box.validate()?;
        let (mut tape, v) = self.frozen();
        let f = tape.constant(ref_feat.values.clone());
        let b = tape.constant(boxes_to_cells(&[*ref_box], ref_feat.stride));
        let m = self.net.iou_modulation(&mut tape, &v, f, b);
        Ok(tape.value(m).clone())
    }

    pub fn scores(&self, modulation: &Tensor, feat: &FeatureMap, boxes: &[BoundingBox]) -> Result<Vec<f64>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let (mut tape, v) = self.frozen();
        let m = tape.constant(modulation.clone());
        let f = tape.constant(feat.values.clone());
        let b = tape.constant(boxes_to_cells(boxes, feat.stride));
        let s = self.net.iou_scores(&mut tape, &v, m, f, b);
        let out: Vec<f64> = tape.value(s).iter().copied().collect();
        check_scores(&out)?;
        Ok(out)
    }

    /// Density over `grid` for the given features.
    pub fn predictive_density(&self, modulation: &Tensor, feat: &FeatureMap, grid: &BoxGrid) -> Result<Vec<f64>> {
        let s = self.scores(modulation, feat, &grid.boxes())?;
        predictive_density(&s, grid.cell_volume())
    }

    pub fn kl_loss(
        &self,
        modulation: &Tensor,
        feat: &FeatureMap,
        grid: &BoxGrid,
        gt: &BoundingBox,
        sigma: f64,
    ) -> Result<f64> {
        let p = label_density(grid, gt, sigma)?;
        let s = self.scores(modulation, feat, &grid.boxes())?;
        kl_regression_loss(&s, &p, grid.cell_volume())
    }

    /// Score and its gradient with respect to the offset parameters of `b`.
    fn score_grad(&self, modulation: &Tensor, feat: &FeatureMap, b: &BoundingBox) -> Result<(f64, [f64; 4])> {
        let (mut tape, v) = self.frozen();
        let m = tape.constant(modulation.clone());
        let f = tape.constant(feat.values.clone());
        let bv = tape.leaf(boxes_to_cells(&[*b], feat.stride));
        let s = self.net.iou_scores(&mut tape, &v, m, f, bv);
        let score = tape.item(s);
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("box score {score}")));
        }
        let grads = tape.backward(s);
        let g = grads.get(bv).expect("box gradient");
        let st = feat.stride;
        let (gx1, gy1, gx2, gy2) = (g[[0, 0]] / st, g[[0, 1]] / st, g[[0, 2]] / st, g[[0, 3]] / st);
        // d/dy at y = 0 relative to `b` itself
        Ok((
            score,
            [
                (gx1 + gx2) * b.w,
                (gy1 + gy2) * b.h,
                (gx2 - gx1) * b.w / 2.0,
                (gy2 - gy1) * b.h / 2.0,
            ],
        ))
    }

    /// Gradient ascent on the head score in offset space. A step that lowers
    /// the score is rejected and the step size halved.
    pub fn refine(
        &self,
        modulation: &Tensor,
        feat: &FeatureMap,
        init: &BoundingBox,
        steps: usize,
        step_size: f64,
    ) -> Result<Refinement> {
        let (mut score, mut grad) = self.score_grad(modulation, feat, init)?;
        let mut b = *init;
        let mut step = step_size;
        let mut history = vec![score];
        for _ in 0..steps {
            let cand = box_from_params(&grad.map(|g| step * g), &b);
            let (s, g) = self.score_grad(modulation, feat, &cand)?;
            if s >= score {
                b = cand;
                score = s;
                grad = g;
            } else {
                step *= 0.5;
            }
            history.push(score);
        }
        Ok(Refinement {
            bbox: b,
            score,
            history,
        })
    }
}
