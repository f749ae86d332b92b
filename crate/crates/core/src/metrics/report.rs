use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::{Attribute, DatasetManifest, SequenceRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_sequence, MetricCurve, TrackResult};

/// Scores averaged over a set of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSummary {
    pub sequences: usize,
    pub pr: f64,
    pub npr: f64,
    pub sr: f64,
    pub pr_curve: MetricCurve,
    pub npr_curve: MetricCurve,
    pub sr_curve: MetricCurve,
}

impl ScoreSummary {
    fn from_results(pairs: &[(&TrackResult, &SequenceRecord)]) -> Result<Option<Self>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let scores = pairs
            .par_iter()
            .map(|(r, s)| evaluate_sequence(r, s))
            .collect::<Result<Vec<_>>>()?;
        let n = scores.len() as f64;
        let mean = |f: &dyn Fn(&crate::metrics::SequenceScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let curves = |f: &dyn Fn(&crate::metrics::SequenceScores) -> MetricCurve| {
            MetricCurve::average(&scores.iter().map(f).collect::<Vec<_>>()).expect("non-empty")
        };
        Ok(Some(Self {
            sequences: scores.len(),
            pr: mean(&|s| s.precision.value),
            npr: mean(&|s| s.normalized_precision.value),
            sr: mean(&|s| s.success.value),
            pr_curve: curves(&|s| s.precision.curve.clone()),
            npr_curve: curves(&|s| s.normalized_precision.curve.clone()),
            sr_curve: curves(&|s| s.success.curve.clone()),
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub tracker: String,
    pub overall: ScoreSummary,
    /// `None` when no evaluated sequence carries the attribute.
    pub attributes: BTreeMap<Attribute, Option<ScoreSummary>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeReport {
    pub rows: Vec<ReportRow>,
}

impl AttributeReport {
    pub fn row(&self, tracker: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.tracker == tracker)
    }

    /// Long-format CSV: one line per tracker and subset; absent subsets print `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tracker,subset,sequences,pr,npr,sr\n");
        for row in &self.rows {
            let mut line = |subset: &str, s: Option<&ScoreSummary>| match s {
                Some(s) => writeln!(
                    out,
                    "{},{},{},{:.4},{:.4},{:.4}",
                    row.tracker, subset, s.sequences, s.pr, s.npr, s.sr
                ),
                None => writeln!(out, "{},{},0,NA,NA,NA", row.tracker, subset),
            };
            line("ALL", Some(&row.overall)).unwrap();
            for (attr, s) in &row.attributes {
                line(attr.code(), s.as_ref()).unwrap();
            }
        }
        out
    }

    /// SR per attribute, one line per tracker, `-` for absent subsets.
    pub fn sr_table(&self) -> String {
        let mut out = format!("{:<16}{:>7}", "tracker", "ALL");
        for a in Attribute::ALL {
            write!(out, "{:>7}", a.code()).unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{:<16}{:>7.3}", row.tracker, row.overall.sr).unwrap();
            for a in Attribute::ALL {
                match &row.attributes[&a] {
                    Some(s) => write!(out, "{:>7.3}", s.sr).unwrap(),
                    None => write!(out, "{:>7}", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Overall and per-attribute scores for every tracker in `results`.
/// Trackers appear in first-seen order.
pub fn attribute_report(results: &[TrackResult], manifest: &DatasetManifest) -> Result<AttributeReport> {
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: BTreeMap<&str, Vec<(&TrackResult, &SequenceRecord)>> = BTreeMap::new();
    for r in results {
        let seq = manifest
            .get(&r.sequence_name)
            .ok_or_else(|| Error::Argument(format!("result sequence `{}` is not in the dataset", r.sequence_name)))?;
        let entry = grouped.entry(&r.tracker).or_insert_with(|| {
            order.push(&r.tracker);
            Vec::new()
        });
        if entry.iter().any(|(e, _)| e.sequence_name == r.sequence_name) {
            return Err(Error::Argument(format!(
                "duplicate result for tracker `{}` on `{}`",
                r.tracker, r.sequence_name
            )));
        }
        entry.push((r, seq));
    }
    let mut rows = Vec::with_capacity(order.len());
    for tracker in order {
        let pairs = &grouped[tracker];
        let overall = ScoreSummary::from_results(pairs)?.expect("tracker has results");
        let mut attributes = BTreeMap::new();
        for a in Attribute::ALL {
            let subset: Vec<_> = pairs.iter().copied().filter(|(_, s)| s.attributes.has(a)).collect();
            attributes.insert(a, ScoreSummary::from_results(&subset)?);
        }
        rows.push(ReportRow {
            tracker: tracker.to_string(),
            overall,
            attributes,
        });
    }
    Ok(AttributeReport { rows })
}

/// Trackers ordered by overall SR, best first; ties broken by name.
pub fn rank_trackers(report: &AttributeReport) -> Vec<(String, f64)> {
    let mut ranked: Vec<_> = report.rows.iter().map(|r| (r.tracker.clone(), r.overall.sr)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BoundingBox;
    use crate::dataset::AttributeVector;

    fn seq(name: &str, attrs: AttributeVector, shift: f64) -> (SequenceRecord, TrackResult, TrackResult) {
        let boxes: Vec<_> = (0..8)
            .map(|i| BoundingBox::new(10.0 + i as f64, 20.0, 12.0, 10.0).unwrap())
            .collect();
        let mut rec = SequenceRecord::from_boxes(name, "toy", &boxes, (100, 80)).unwrap();
        rec.attributes = attrs;
        let perfect = TrackResult::new("perfect", name, boxes.clone());
        let off = TrackResult::new("off", name, boxes.iter().map(|b| b.translate(shift, 0.0)).collect());
        (rec, perfect, off)
    }

    #[test]
    fn single_fm_sequence_populates_only_fm() {
        let (rec, perfect, _) = seq("a", AttributeVector::default().with(Attribute::FM), 0.0);
        let m = DatasetManifest::new(vec![rec]).unwrap();
        let rep = attribute_report(&[perfect], &m).unwrap();
        let row = rep.row("perfect").unwrap();
        assert_eq!(row.attributes[&Attribute::FM].as_ref(), Some(&row.overall));
        for a in Attribute::ALL.into_iter().filter(|&a| a != Attribute::FM) {
            assert!(row.attributes[&a].is_none());
        }
        assert_eq!(row.overall.pr, 1.0);
        assert_eq!(row.overall.npr, 1.0);
        assert!((row.overall.sr - 50.0 / 51.0).abs() < 1e-12);
        assert!(rep.to_csv().contains("perfect,SV,0,NA,NA,NA"));
    }

    #[test]
    fn attribute_subset_uses_flagged_sequences() {
        let (ra, _, oa) = seq("a", AttributeVector::default().with(Attribute::SV), 3.0);
        let (rb, _, ob) = seq("b", AttributeVector::default(), 40.0);
        let m = DatasetManifest::new(vec![ra.clone(), rb]).unwrap();
        let rep = attribute_report(&[oa.clone(), ob], &m).unwrap();
        let row = rep.row("off").unwrap();
        let only_a = attribute_report(&[oa], &DatasetManifest::new(vec![ra]).unwrap()).unwrap();
        assert_eq!(row.attributes[&Attribute::SV].as_ref(), Some(&only_a.rows[0].overall));
        assert_eq!(row.overall.sequences, 2);
        assert!(row.overall.sr < only_a.rows[0].overall.sr);
    }

    #[test]
    fn ranking_and_errors() {
        let (ra, pa, oa) = seq("a", AttributeVector::default(), 5.0);
        let m = DatasetManifest::new(vec![ra]).unwrap();
        let rep = attribute_report(&[oa.clone(), pa.clone()], &m).unwrap();
        let ranked = rank_trackers(&rep);
        assert_eq!(ranked[0].0, "perfect");
        assert_eq!(rep.rows[0].tracker, "off");
        assert!(attribute_report(&[pa.clone(), pa], &m).is_err());
        let stray = TrackResult::new("x", "missing", oa.boxes);
        assert!(attribute_report(&[stray], &m).is_err());
        assert!(rep.sr_table().lines().count() == 3);
    }
}
