use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::dataset::{Attribute, DatasetManifest};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub classes: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Exact mean; see [`DatasetStats::avg_frames_display`] for the table value.
    pub avg_frames: f64,
    pub total_frames: usize,
    pub class_histogram: BTreeMap<String, usize>,
    pub attribute_counts: BTreeMap<Attribute, usize>,
}

impl DatasetStats {
    /// Whole frames, truncated, as benchmark summary tables print them.
    pub fn avg_frames_display(&self) -> usize {
        self.avg_frames.floor() as usize
    }

    /// Total frames in thousands with one decimal, e.g. `217.7K`.
    pub fn total_frames_display(&self) -> String {
        format!("{:.1}K", self.total_frames as f64 / 1000.0)
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "videos        {}", self.videos)?;
        writeln!(f, "classes       {}", self.classes)?;
        writeln!(f, "min frames    {}", self.min_frames)?;
        writeln!(f, "max frames    {}", self.max_frames)?;
        writeln!(f, "avg frames    {}", self.avg_frames_display())?;
        writeln!(f, "total frames  {}", self.total_frames_display())?;
        for (attr, n) in &self.attribute_counts {
            writeln!(f, "  {attr:<4} {n}")?;
        }
        Ok(())
    }
}

/// Frame-count and label summaries. Panics on an empty manifest.
pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    assert!(!manifest.is_empty(), "dataset_stats needs at least one sequence");
    let lens: Vec<usize> = manifest.sequences().iter().map(|s| s.len()).collect();
    let total: usize = lens.iter().sum();
    let mut class_histogram = BTreeMap::new();
    let mut attribute_counts: BTreeMap<Attribute, usize> = Attribute::ALL.into_iter().map(|a| (a, 0)).collect();
    for s in manifest.sequences() {
        *class_histogram.entry(s.class_label.clone()).or_insert(0) += 1;
        for a in s.attributes.active() {
            *attribute_counts.get_mut(&a).unwrap() += 1;
        }
    }
    DatasetStats {
        videos: lens.len(),
        classes: class_histogram.len(),
        min_frames: *lens.iter().min().unwrap(),
        max_frames: *lens.iter().max().unwrap(),
        avg_frames: total as f64 / lens.len() as f64,
        total_frames: total,
        class_histogram,
        attribute_counts,
    }
}
