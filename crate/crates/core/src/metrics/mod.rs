//! One-pass evaluation: precision, normalized precision and success.
//!
//! Every curve uses 51 uniform thresholds. Precision and normalized precision
//! count a frame when its error is `<=` the threshold, success when the
//! overlap is strictly `>` the threshold. Under that convention a perfect
//! tracker scores 1.0 on PR and NPR but 50/51 on SR, because no overlap
//! exceeds the last threshold of 1.0.
//!
//! NPR is the mean of the normalized-precision curve over `[0, 0.5]`, i.e.
//! the area under it divided by the 0.5 range, so all three scores share
//! the `[0, 1]` scale.

mod plot;
mod report;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::dataset::SequenceRecord;
use crate::error::{Error, Result};

pub use plot::{curve_plot_svg, write_plots, PlotSeries};
pub use report::{attribute_report, rank_trackers, AttributeReport, ReportRow, ScoreSummary};

/// Center-error threshold for the headline PR, in pixels.
pub const PR_THRESHOLD: f64 = 5.0;
pub const CURVE_POINTS: usize = 51;
pub const PR_RANGE: f64 = 50.0;
pub const NPR_RANGE: f64 = 0.5;
pub const SR_RANGE: f64 = 1.0;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn center_error(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    (px - gx).hypot(py - gy)
}

pub fn normalized_center_error(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Degenerate(format!(
            "ground-truth box {}x{} cannot normalize a center error",
            gt.w, gt.h
        )));
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Ok(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricCurve {
    pub fn grid(range: f64) -> Vec<f64> {
        (0..CURVE_POINTS)
            .map(|i| range * i as f64 / (CURVE_POINTS - 1) as f64)
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Pointwise mean of same-grid curves.
    pub fn average(curves: &[MetricCurve]) -> Option<MetricCurve> {
        let first = curves.first()?;
        let mut values = vec![0.0; first.values.len()];
        for c in curves {
            assert_eq!(c.thresholds, first.thresholds, "curves on different grids");
            for (v, x) in values.iter_mut().zip(&c.values) {
                *v += x;
            }
        }
        for v in &mut values {
            *v /= curves.len() as f64;
        }
        Some(MetricCurve {
            thresholds: first.thresholds.clone(),
            values,
        })
    }

    /// Fraction of `errors` at or below each threshold.
    fn at_most(errors: &[f64], range: f64) -> Self {
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let thresholds = Self::grid(range);
        let values = thresholds
            .iter()
            .map(|&t| sorted.partition_point(|&e| e <= t) as f64 / n)
            .collect();
        Self { thresholds, values }
    }

    /// Fraction of `overlaps` strictly above each threshold.
    fn above(overlaps: &[f64], range: f64) -> Self {
        let mut sorted = overlaps.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let thresholds = Self::grid(range);
        let values = thresholds
            .iter()
            .map(|&t| (n - sorted.partition_point(|&o| o <= t)) as f64 / n as f64)
            .collect();
        Self { thresholds, values }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub curve: MetricCurve,
}

/// Tracker output for one sequence. The first box is the ground-truth
/// initialization by protocol and is scored like any other frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub tracker: String,
    pub sequence_name: String,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Serialize, Deserialize)]
struct TrackResultJson {
    tracker: String,
    sequence: String,
    boxes: Vec<[f64; 4]>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(TrackResultJson),
    Many(Vec<TrackResultJson>),
}

impl TrackResultJson {
    fn into_result(self) -> Result<TrackResult> {
        let boxes = self
            .boxes
            .iter()
            .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
            .collect::<Result<_>>()?;
        Ok(TrackResult {
            tracker: self.tracker,
            sequence_name: self.sequence,
            boxes,
        })
    }
}

impl TrackResult {
    pub fn new(tracker: &str, sequence_name: &str, boxes: Vec<BoundingBox>) -> Self {
        Self {
            tracker: tracker.to_string(),
            sequence_name: sequence_name.to_string(),
            boxes,
        }
    }

    fn as_json(&self) -> TrackResultJson {
        TrackResultJson {
            tracker: self.tracker.clone(),
            sequence: self.sequence_name.clone(),
            boxes: self.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.as_json()).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<TrackResultJson>(text)?.into_result()
    }

    fn check_against(&self, gt: &SequenceRecord) -> Result<()> {
        if self.boxes.len() != gt.len() {
            return Err(Error::Argument(format!(
                "result for `{}` has {} boxes, sequence has {} frames",
                self.sequence_name,
                self.boxes.len(),
                gt.len()
            )));
        }
        Ok(())
    }
}

/// Reads a file holding one result object or an array of them.
pub fn read_results(path: &Path) -> Result<Vec<TrackResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str::<OneOrMany>(&text)? {
        OneOrMany::One(r) => Ok(vec![r.into_result()?]),
        OneOrMany::Many(rs) => rs.into_iter().map(TrackResultJson::into_result).collect(),
    }
}

pub fn write_results(path: &Path, results: &[TrackResult]) -> Result<()> {
    let json: Vec<TrackResultJson> = results.iter().map(TrackResult::as_json).collect();
    let text = serde_json::to_string_pretty(&json)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn aligned(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Argument(format!(
            "{} predicted boxes for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Argument("cannot score an empty sequence".into()));
    }
    Ok(())
}

/// PR at 5 px plus the curve over 0..=50 px.
pub fn precision(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<Score> {
    aligned(pred, gt)?;
    let errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_error(p, g)).collect();
    let curve = MetricCurve::at_most(&errors, PR_RANGE);
    let value = errors.iter().filter(|&&e| e <= PR_THRESHOLD).count() as f64 / errors.len() as f64;
    Ok(Score { value, curve })
}

pub fn normalized_precision(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<Score> {
    aligned(pred, gt)?;
    let errors = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| normalized_center_error(p, g))
        .collect::<Result<Vec<_>>>()?;
    let curve = MetricCurve::at_most(&errors, NPR_RANGE);
    Ok(Score {
        value: curve.mean(),
        curve,
    })
}

pub fn success(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<Score> {
    aligned(pred, gt)?;
    let overlaps: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let curve = MetricCurve::above(&overlaps, SR_RANGE);
    Ok(Score {
        value: curve.mean(),
        curve,
    })
}

pub fn precision_score(result: &TrackResult, gt: &SequenceRecord) -> Result<Score> {
    result.check_against(gt)?;
    precision(&result.boxes, &gt.boxes())
}

pub fn normalized_precision_score(result: &TrackResult, gt: &SequenceRecord) -> Result<Score> {
    result.check_against(gt)?;
    normalized_precision(&result.boxes, &gt.boxes())
}

pub fn success_score(result: &TrackResult, gt: &SequenceRecord) -> Result<Score> {
    result.check_against(gt)?;
    success(&result.boxes, &gt.boxes())
}

/// All three scores for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScores {
    pub precision: Score,
    pub normalized_precision: Score,
    pub success: Score,
}

pub fn evaluate_sequence(result: &TrackResult, gt: &SequenceRecord) -> Result<SequenceScores> {
    result.check_against(gt)?;
    let gt_boxes = gt.boxes();
    Ok(SequenceScores {
        precision: precision(&result.boxes, &gt_boxes)?,
        normalized_precision: normalized_precision(&result.boxes, &gt_boxes)?,
        success: success(&result.boxes, &gt_boxes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    /// Fraction of a fine sample grid inside both boxes over inside either.
    fn grid_iou(a: &BoundingBox, b: &BoundingBox, step: f64) -> f64 {
        let inside = |r: &BoundingBox, x: f64, y: f64| x >= r.x && x < r.right() && y >= r.y && y < r.bottom();
        let (x0, y0) = (a.x.min(b.x), a.y.min(b.y));
        let (x1, y1) = (a.right().max(b.right()), a.bottom().max(b.bottom()));
        let (mut inter, mut union) = (0usize, 0usize);
        let mut y = y0 + step / 2.0;
        while y < y1 {
            let mut x = x0 + step / 2.0;
            while x < x1 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
                x += step;
            }
            y += step;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 1.0, 1.0)), 0.0);
        let b = bx(1.0, 1.0, 2.0, 2.0);
        assert_relative_eq!(iou(&a, &b), 1.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(grid_iou(&a, &b, 0.01), 1.0 / 7.0, epsilon = 1e-9);
    }

    #[test]
    fn center_error_examples() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(center_error(&g, &g), 0.0);
        assert_relative_eq!(center_error(&bx(3.0, 4.0, 4.0, 4.0), &bx(0.0, 0.0, 4.0, 4.0)), 5.0);
        assert_relative_eq!(center_error(&g.translate(7.0, 0.0), &g), 7.0);
        assert_eq!(normalized_center_error(&g, &g).unwrap(), 0.0);
        assert_relative_eq!(normalized_center_error(&g.translate(10.0, 0.0), &g).unwrap(), 1.0);
        let g2 = bx(0.0, 0.0, 4.0, 2.0);
        assert_relative_eq!(normalized_center_error(&g2.translate(12.0, 8.0), &g2).unwrap(), 5.0);
        let flat = BoundingBox {
            x: 0.0,
            y: 0.0,
            w: 0.0,
            h: 3.0,
        };
        assert!(normalized_center_error(&g, &flat).is_err());
    }

    #[test]
    fn score_examples() {
        let gt: Vec<_> = (0..10).map(|i| bx(i as f64, 0.0, 8.0, 8.0)).collect();
        assert_eq!(precision(&gt, &gt).unwrap().value, 1.0);
        let half: Vec<_> = gt
            .iter()
            .enumerate()
            .map(|(i, b)| if i % 2 == 0 { *b } else { b.translate(100.0, 0.0) })
            .collect();
        assert_eq!(precision(&half, &gt).unwrap().value, 0.5);
        let at5: Vec<_> = gt.iter().map(|b| b.translate(3.0, 4.0)).collect();
        assert_eq!(precision(&at5, &gt).unwrap().value, 1.0);

        assert_eq!(normalized_precision(&gt, &gt).unwrap().value, 1.0);
        let far: Vec<_> = gt.iter().map(|b| b.translate(6.0, 0.0)).collect();
        assert_eq!(normalized_precision(&far, &gt).unwrap().value, 0.0);
        let quarter: Vec<_> = gt.iter().map(|b| b.translate(2.0, 0.0)).collect();
        // thresholds 0.25, 0.26, ..., 0.50 -> 26 of 51
        assert_relative_eq!(
            normalized_precision(&quarter, &gt).unwrap().value,
            26.0 / 51.0,
            epsilon = 1e-12
        );

        assert_relative_eq!(success(&gt, &gt).unwrap().value, 50.0 / 51.0, epsilon = 1e-12);
        assert_eq!(
            success(&far.iter().map(|b| b.translate(50.0, 0.0)).collect::<Vec<_>>(), &gt)
                .unwrap()
                .value,
            0.0
        );
        // IoU exactly 0.5: half-width overlap of two 8x8 boxes is 32/(128-32) = 1/3,
        // so use a box that contains half of the gt area instead.
        let halves: Vec<_> = gt.iter().map(|b| bx(b.x, b.y, 4.0, 8.0)).collect();
        assert_eq!(iou(&halves[0], &gt[0]), 0.5);
        // thresholds 0.00 .. 0.48 -> 25 of 51
        assert_relative_eq!(success(&halves, &gt).unwrap().value, 25.0 / 51.0, epsilon = 1e-12);

        assert!(precision(&gt[..3], &gt).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = TrackResult::new("t", "seq", vec![bx(1.0, 2.0, 3.0, 4.0)]);
        let text = r.to_json();
        assert!(text.contains("\"sequence\":\"seq\""));
        assert_eq!(TrackResult::from_json(&text).unwrap(), r);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_results(&path, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(read_results(&path).unwrap().len(), 2);
        std::fs::write(&path, &text).unwrap();
        assert_eq!(read_results(&path).unwrap(), vec![r]);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0f64..50.0, -50.0f64..50.0, 1.0f64..40.0, 1.0f64..40.0).prop_map(|(x, y, w, h)| BoundingBox { x, y, w, h })
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<BoundingBox>, Vec<BoundingBox>)> {
        (1usize..=50).prop_flat_map(|n| {
            (
                proptest::collection::vec(arb_box(), n),
                proptest::collection::vec(arb_box(), n),
            )
        })
    }

    /// Independent per-frame recount of every curve point.
    fn recount(pred: &[BoundingBox], gt: &[BoundingBox]) -> [Vec<f64>; 3] {
        let n = pred.len() as f64;
        let mut out = [vec![], vec![], vec![]];
        for i in 0..CURVE_POINTS {
            let (tp, tn, ts) = (i as f64, 0.5 * i as f64 / 50.0, i as f64 / 50.0);
            let (mut a, mut b, mut c) = (0, 0, 0);
            for (p, g) in pred.iter().zip(gt) {
                let (dx, dy) = (p.x + p.w / 2.0 - g.x - g.w / 2.0, p.y + p.h / 2.0 - g.y - g.h / 2.0);
                if (dx * dx + dy * dy).sqrt() <= tp {
                    a += 1;
                }
                if ((dx / g.w).powi(2) + (dy / g.h).powi(2)).sqrt() <= tn {
                    b += 1;
                }
                if iou(p, g) > ts {
                    c += 1;
                }
            }
            out[0].push(a as f64 / n);
            out[1].push(b as f64 / n);
            out[2].push(c as f64 / n);
        }
        out
    }

    proptest! {
        #[test]
        fn curves_match_brute_force((pred, gt) in arb_pair()) {
            let [p, q, s] = recount(&pred, &gt);
            prop_assert_eq!(precision(&pred, &gt).unwrap().curve.values, p);
            prop_assert_eq!(normalized_precision(&pred, &gt).unwrap().curve.values, q);
            prop_assert_eq!(success(&pred, &gt).unwrap().curve.values, s);
        }

        #[test]
        fn scores_bounded_and_monotone((pred, gt) in arb_pair()) {
            let p = precision(&pred, &gt).unwrap();
            let q = normalized_precision(&pred, &gt).unwrap();
            let s = success(&pred, &gt).unwrap();
            for sc in [&p, &q, &s] {
                prop_assert!((0.0..=1.0).contains(&sc.value));
                prop_assert!(sc.curve.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert!(p.curve.values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(q.curve.values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(s.curve.values.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn translation_invariant((pred, gt) in arb_pair(), dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
            let tp: Vec<_> = pred.iter().map(|b| b.translate(dx, dy)).collect();
            let tg: Vec<_> = gt.iter().map(|b| b.translate(dx, dy)).collect();
            for (a, b) in pred.iter().zip(&gt) {
                let (c, d) = (a.translate(dx, dy), b.translate(dx, dy));
                prop_assert!((center_error(a, b) - center_error(&c, &d)).abs() < 1e-9);
                prop_assert!((iou(a, b) - iou(&c, &d)).abs() < 1e-9);
            }
            // Random errors essentially never sit within rounding of a grid point.
            prop_assert!((precision(&tp, &tg).unwrap().value - precision(&pred, &gt).unwrap().value).abs() < 1e-12);
            prop_assert!((normalized_precision(&tp, &tg).unwrap().value - normalized_precision(&pred, &gt).unwrap().value).abs() < 1e-12);
            prop_assert!((success(&tp, &tg).unwrap().value - success(&pred, &gt).unwrap().value).abs() < 1e-12);
        }

        #[test]
        fn scale_covariant((pred, gt) in arb_pair(), k in 0.25f64..8.0) {
            for (a, b) in pred.iter().zip(&gt) {
                let (c, d) = (a.scale(k), b.scale(k));
                prop_assert!((center_error(&c, &d) - k * center_error(a, b)).abs() < 1e-9 * (1.0 + k * 100.0));
                prop_assert!((iou(&c, &d) - iou(a, b)).abs() < 1e-9);
                prop_assert!((normalized_center_error(&c, &d).unwrap() - normalized_center_error(a, b).unwrap()).abs() < 1e-9);
            }
        }
    }
}
