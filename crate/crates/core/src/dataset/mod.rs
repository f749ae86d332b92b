//! Sequence records, tiny-object classification, statistics and splits.
//!
//! A sequence is tiny when both its mean per-frame box area is below
//! `22 * 22 = 484` px² and its mean box-to-image area ratio is below 1%.
//! "Average absolute size" is read as the mean of per-frame *areas*; the
//! mean of side lengths would be an equally defensible reading and gives
//! different answers for sequences with strong scale variation.

mod io;
mod stats;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;

pub use io::{
    format_groundtruth, load_frames, load_manifest, load_sequence, parse_attributes, parse_groundtruth, read_splits,
    write_manifest, write_sequence, write_splits, LoadReport, SequenceLoadError,
};
pub use stats::{dataset_stats, DatasetStats};

/// Mean box area threshold, 22×22 px².
pub const TINY_ABSOLUTE_AREA: f64 = 22.0 * 22.0;
/// Mean relative area threshold.
pub const TINY_RELATIVE_AREA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    /// Scale variation.
    SV,
    /// Fast motion.
    FM,
    /// Out of view.
    OV,
    /// Illumination variation.
    IV,
    /// Camera motion.
    CM,
    /// Motion blur.
    MB,
    /// Background clutter.
    BC,
    /// Similar object.
    SO,
    /// Partial occlusion.
    PO,
    /// Full occlusion.
    FO,
    /// Abrupt motion.
    AM,
    /// Low illumination.
    LI,
}

impl Attribute {
    /// Fixed on-disk order of the flags in `attributes.txt`.
    pub const ALL: [Attribute; 12] = [
        Attribute::SV,
        Attribute::FM,
        Attribute::OV,
        Attribute::IV,
        Attribute::CM,
        Attribute::MB,
        Attribute::BC,
        Attribute::SO,
        Attribute::PO,
        Attribute::FO,
        Attribute::AM,
        Attribute::LI,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Attribute::SV => "SV",
            Attribute::FM => "FM",
            Attribute::OV => "OV",
            Attribute::IV => "IV",
            Attribute::CM => "CM",
            Attribute::MB => "MB",
            Attribute::BC => "BC",
            Attribute::SO => "SO",
            Attribute::PO => "PO",
            Attribute::FO => "FO",
            Attribute::AM => "AM",
            Attribute::LI => "LI",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Attribute::SV => "box area ratio leaves [0.5, 2] within one second",
            Attribute::FM => "per-frame box motion exceeds the box size",
            Attribute::OV => "part of the target leaves the image",
            Attribute::IV => "target illumination changes significantly",
            Attribute::CM => "abrupt camera motion",
            Attribute::MB => "target region is motion blurred",
            Attribute::BC => "background near the target resembles it",
            Attribute::SO => "similar objects near the target",
            Attribute::PO => "target partially occluded",
            Attribute::FO => "target fully occluded",
            Attribute::AM => "abrupt motion of camera or target",
            Attribute::LI => "low illumination on the target",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeVector([bool; 12]);

impl AttributeVector {
    pub fn from_flags(flags: [bool; 12]) -> Self {
        Self(flags)
    }

    pub fn with(mut self, attr: Attribute) -> Self {
        self.0[attr.index()] = true;
        self
    }

    pub fn set(&mut self, attr: Attribute, on: bool) {
        self.0[attr.index()] = on;
    }

    pub fn has(&self, attr: Attribute) -> bool {
        self.0[attr.index()]
    }

    pub fn flags(&self) -> [bool; 12] {
        self.0
    }

    pub fn active(&self) -> impl Iterator<Item = Attribute> + '_ {
        Attribute::ALL.into_iter().filter(|a| self.has(*a))
    }

    pub fn to_line(&self) -> String {
        self.0
            .iter()
            .map(|&b| if b { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    pub bbox: BoundingBox,
    pub image_width: u32,
    pub image_height: u32,
}

/// Where the pixels of a sequence come from.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum FrameSource {
    /// A directory of per-frame image files, read in file-name order.
    Directory(PathBuf),
    /// Re-rendered on demand by the synthetic generator.
    Synthetic(Box<SynthConfig>),
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub class_label: String,
    pub annotations: Vec<FrameAnnotation>,
    pub attributes: AttributeVector,
    pub frame_source: FrameSource,
}

impl SequenceRecord {
    /// Builds a record from boxes on a fixed image size, numbering frames from 0.
    pub fn from_boxes(
        name: impl Into<String>,
        class_label: impl Into<String>,
        boxes: &[BoundingBox],
        image_size: (u32, u32),
    ) -> Result<Self> {
        let record = Self {
            name: name.into(),
            class_label: class_label.into(),
            annotations: boxes
                .iter()
                .enumerate()
                .map(|(i, b)| FrameAnnotation {
                    frame_index: i,
                    bbox: *b,
                    image_width: image_size.0,
                    image_height: image_size.1,
                })
                .collect(),
            attributes: AttributeVector::default(),
            frame_source: FrameSource::None,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    pub fn image_size(&self) -> Option<(u32, u32)> {
        self.annotations.first().map(|a| (a.image_width, a.image_height))
    }

    /// Checks every record invariant, naming the first violation.
    pub fn validate(&self) -> Result<()> {
        let name = &self.name;
        let first = self
            .annotations
            .first()
            .ok_or_else(|| Error::validation(name, "sequence has no annotations"))?;
        let (iw, ih) = (first.image_width, first.image_height);
        if iw == 0 || ih == 0 {
            return Err(Error::validation(name, "image size must be positive"));
        }
        let eps = 1e-9;
        for (n, a) in self.annotations.iter().enumerate() {
            if n > 0 && a.frame_index <= self.annotations[n - 1].frame_index {
                return Err(Error::validation(
                    name,
                    format!("frame index {} not strictly increasing", a.frame_index),
                ));
            }
            if (a.image_width, a.image_height) != (iw, ih) {
                return Err(Error::validation(
                    name,
                    format!("frame {} has a different image size", a.frame_index),
                ));
            }
            a.bbox
                .validate()
                .map_err(|e| Error::validation(name, format!("frame {}: {e}", a.frame_index)))?;
            let b = &a.bbox;
            if b.x < -eps || b.y < -eps || b.right() > iw as f64 + eps || b.bottom() > ih as f64 + eps {
                return Err(Error::validation(
                    name,
                    format!(
                        "frame {}: box {} exceeds the {iw}x{ih} image",
                        a.frame_index,
                        b.to_csv()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Mean over frames of the box area `w * h`, in px².
pub fn average_absolute_size(seq: &SequenceRecord) -> f64 {
    assert!(!seq.is_empty(), "sequence has no annotations");
    let total: f64 = seq.annotations.iter().map(|a| a.bbox.area()).sum();
    total / seq.len() as f64
}

/// Mean over frames of the box area divided by the image area.
pub fn average_relative_size(seq: &SequenceRecord) -> f64 {
    assert!(!seq.is_empty(), "sequence has no annotations");
    let total: f64 = seq
        .annotations
        .iter()
        .map(|a| a.bbox.area() / (a.image_width as f64 * a.image_height as f64))
        .sum();
    total / seq.len() as f64
}

/// Both averages strictly below their thresholds.
///
/// Compared as sums against `n * threshold`: dividing first makes a sequence
/// sitting exactly on the 1% bound land a rounding error either side of it.
pub fn is_tiny(seq: &SequenceRecord) -> bool {
    assert!(!seq.is_empty(), "sequence has no annotations");
    let n = seq.len() as f64;
    let (mut area, mut percent) = (0.0, 0.0);
    for a in &seq.annotations {
        area += a.bbox.area();
        percent += 100.0 * a.bbox.area() / (a.image_width as f64 * a.image_height as f64);
    }
    area < TINY_ABSOLUTE_AREA * n && percent < 100.0 * TINY_RELATIVE_AREA * n
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::Unassigned => "unassigned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "train" => Some(SplitTag::Train),
            "test" => Some(SplitTag::Test),
            "unassigned" => Some(SplitTag::Unassigned),
            _ => None,
        }
    }
}

/// Sequences with a split tag each. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    sequences: Vec<SequenceRecord>,
    splits: Vec<SplitTag>,
}

impl DatasetManifest {
    pub fn new(sequences: Vec<SequenceRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &sequences {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Argument(format!("duplicate sequence name `{}`", s.name)));
            }
        }
        let splits = vec![SplitTag::Unassigned; sequences.len()];
        Ok(Self { sequences, splits })
    }

    pub fn sequences(&self) -> &[SequenceRecord] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&SequenceRecord> {
        self.position(name).map(|i| &self.sequences[i])
    }

    pub fn split_of(&self, name: &str) -> Option<SplitTag> {
        self.position(name).map(|i| self.splits[i])
    }

    pub fn set_split(&mut self, name: &str, tag: SplitTag) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::Argument(format!("unknown sequence `{name}`")))?;
        self.splits[i] = tag;
        Ok(())
    }

    pub fn with_split(&self, tag: SplitTag) -> impl Iterator<Item = &SequenceRecord> {
        self.sequences
            .iter()
            .zip(&self.splits)
            .filter(move |(_, t)| **t == tag)
            .map(|(s, _)| s)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SequenceRecord, SplitTag)> {
        self.sequences.iter().zip(self.splits.iter().copied())
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.sequences.iter().position(|s| s.name == name)
    }
}

/// Tags `test_count` sequences drawn uniformly from `test_pool` as test and
/// every other sequence as train. Deterministic for a fixed seed.
pub fn split_manifest(
    manifest: &DatasetManifest,
    test_pool: &[String],
    test_count: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut pool: Vec<&str> = Vec::with_capacity(test_pool.len());
    let mut seen = HashSet::new();
    for name in test_pool {
        if manifest.get(name).is_none() {
            return Err(Error::Argument(format!("test pool names unknown sequence `{name}`")));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Argument(format!("test pool lists `{name}` twice")));
        }
        pool.push(name);
    }
    if test_count > pool.len() {
        return Err(Error::Argument(format!(
            "requested {test_count} test sequences from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<&str> = pool.choose_multiple(&mut rng, test_count).copied().collect();
    let mut out = manifest.clone();
    for (seq, tag) in out.sequences.iter().zip(out.splits.iter_mut()) {
        *tag = if chosen.contains(seq.name.as_str()) {
            SplitTag::Test
        } else {
            SplitTag::Train
        };
    }
    Ok(out)
}
