//! On-disk sequence layout.
//!
//! ```text
//! <root>/
//!   splits.txt            optional, `name,train|test|unassigned` per line
//!   <sequence>/
//!     groundtruth.txt     one `x,y,w,h` line per frame, top-left origin
//!     attributes.txt      12 comma-separated 0/1 flags, SV FM OV IV CM MB BC SO PO FO AM LI
//!     meta.txt            `key=value` lines: class, width, height, optional frames
//!     img/                optional per-frame images, read in file-name order
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bbox::BoundingBox;
use crate::dataset::{
    Attribute, AttributeVector, DatasetManifest, FrameAnnotation, FrameSource, SequenceRecord, SplitTag,
};
use crate::error::{Error, Result};
use crate::imaging::{self, Frame};
use crate::synth;

const GROUNDTRUTH: &str = "groundtruth.txt";
const ATTRIBUTES: &str = "attributes.txt";
const META: &str = "meta.txt";
const SPLITS: &str = "splits.txt";
const IMAGES: &str = "img";

/// A sequence directory that failed to load or validate.
#[derive(Debug)]
pub struct SequenceLoadError {
    pub sequence: String,
    pub error: Error,
}

impl fmt::Display for SequenceLoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.sequence, self.error)
    }
}

/// Result of scanning a dataset directory: everything that loaded, plus one
/// entry per sequence that did not.
#[derive(Debug)]
pub struct LoadReport {
    pub manifest: DatasetManifest,
    pub errors: Vec<SequenceLoadError>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            BoundingBox::parse_csv(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn format_groundtruth(boxes: &[BoundingBox]) -> String {
    let mut s = String::with_capacity(boxes.len() * 24);
    for b in boxes {
        s.push_str(&b.to_csv());
        s.push('\n');
    }
    s
}

pub fn parse_attributes(text: &str, sequence: &str) -> Result<AttributeVector> {
    let values: Vec<&str> = text
        .split([',', '\n', '\r'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if values.len() != Attribute::ALL.len() {
        return Err(Error::validation(
            sequence,
            format!(
                "attributes.txt has {} values, expected {}",
                values.len(),
                Attribute::ALL.len()
            ),
        ));
    }
    let mut flags = [false; 12];
    for (slot, v) in flags.iter_mut().zip(values) {
        *slot = match v {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::validation(
                    sequence,
                    format!("attribute value `{other}` is not 0 or 1"),
                ))
            }
        };
    }
    Ok(AttributeVector::from_flags(flags))
}

struct Meta {
    class: String,
    width: u32,
    height: u32,
    frames: Option<usize>,
}

fn parse_meta(text: &str, sequence: &str) -> Result<Meta> {
    let mut class = None;
    let mut width = None;
    let mut height = None;
    let mut frames = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::validation(sequence, format!("meta line `{line}` is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::validation(sequence, format!("meta `{k}` is not an integer: `{v}`")))
        };
        match k {
            "class" => class = Some(v.to_string()),
            "width" => width = Some(num(v)? as u32),
            "height" => height = Some(num(v)? as u32),
            "frames" => frames = Some(num(v)? as usize),
            other => return Err(Error::validation(sequence, format!("unknown meta key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::validation(sequence, format!("meta.txt is missing `{k}`"));
    Ok(Meta {
        class: class.ok_or_else(|| missing("class"))?,
        width: width.ok_or_else(|| missing("width"))?,
        height: height.ok_or_else(|| missing("height"))?,
        frames,
    })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads and validates one sequence directory.
pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let gt_path = dir.join(GROUNDTRUTH);
    let boxes = parse_groundtruth(&read(&gt_path)?, &gt_path)?;
    let attributes = parse_attributes(&read(&dir.join(ATTRIBUTES))?, &name)?;
    let meta = parse_meta(&read(&dir.join(META))?, &name)?;

    let img_dir = dir.join(IMAGES);
    let frame_count = if img_dir.is_dir() {
        Some(image_files(&img_dir)?.len())
    } else {
        meta.frames
    };
    if let Some(n) = frame_count {
        if n != boxes.len() {
            return Err(Error::validation(
                &name,
                format!("{} annotations for {n} frames", boxes.len()),
            ));
        }
    }

    let mut record = SequenceRecord::from_boxes(&name, meta.class, &boxes, (meta.width, meta.height))?;
    record.attributes = attributes;
    if img_dir.is_dir() {
        record.frame_source = FrameSource::Directory(img_dir);
    }
    Ok(record)
}

/// Scans `root` for sequence directories. Only an unreadable root is a hard
/// error; broken sequences are reported in [`LoadReport::errors`].
pub fn load_manifest(root: &Path) -> Result<LoadReport> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut sequences = Vec::new();
    let mut errors = Vec::new();
    for dir in dirs {
        let sequence = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        match load_sequence(&dir) {
            Ok(r) => sequences.push(r),
            Err(error) => errors.push(SequenceLoadError { sequence, error }),
        }
    }
    let mut manifest = DatasetManifest::new(sequences)?;
    let split_path = root.join(SPLITS);
    if split_path.is_file() {
        for (name, tag) in read_splits(&split_path)? {
            if manifest.get(&name).is_some() {
                manifest.set_split(&name, tag)?;
            } else {
                errors.push(SequenceLoadError {
                    sequence: name.clone(),
                    error: Error::validation(&name, "listed in splits.txt but not present"),
                });
            }
        }
    }
    Ok(LoadReport { manifest, errors })
}

pub fn read_splits(path: &Path) -> Result<Vec<(String, SplitTag)>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let (name, tag) = l
                .split_once(',')
                .ok_or_else(|| parse_err("expected `name,tag`".into()))?;
            let tag = SplitTag::parse(tag).ok_or_else(|| parse_err(format!("unknown split tag `{}`", tag.trim())))?;
            Ok((name.trim().to_string(), tag))
        })
        .collect()
}

pub fn write_splits(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut s = String::new();
    for (seq, tag) in manifest.iter() {
        s.push_str(&format!("{},{}\n", seq.name, tag.as_str()));
    }
    write(path, &s)
}

/// Writes the annotation files of `record` (and frames, if given) under
/// `root/<name>/`.
pub fn write_sequence(root: &Path, record: &SequenceRecord, frames: Option<&[Frame]>) -> Result<PathBuf> {
    let dir = root.join(&record.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(GROUNDTRUTH), &format_groundtruth(&record.boxes()))?;
    write(&dir.join(ATTRIBUTES), &format!("{}\n", record.attributes.to_line()))?;
    let (w, h) = record.image_size().unwrap_or((0, 0));
    let mut meta = format!("class={}\nwidth={w}\nheight={h}\n", record.class_label);
    if frames.is_none() {
        meta.push_str(&format!("frames={}\n", record.len()));
    }
    write(&dir.join(META), &meta)?;
    if let Some(frames) = frames {
        let img = dir.join(IMAGES);
        fs::create_dir_all(&img).map_err(|e| Error::io(&img, e))?;
        for (i, f) in frames.iter().enumerate() {
            imaging::save_png(f, &img.join(format!("{:08}.png", i + 1)))?;
        }
    }
    Ok(dir)
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for seq in manifest.sequences() {
        write_sequence(root, seq, None)?;
    }
    write_splits(&root.join(SPLITS), manifest)
}

/// Reads or regenerates the pixels of a sequence.
pub fn load_frames(record: &SequenceRecord) -> Result<Vec<Frame>> {
    match &record.frame_source {
        FrameSource::Directory(dir) => image_files(dir)?.iter().map(|p| imaging::load_image(p)).collect(),
        FrameSource::Synthetic(cfg) => Ok(synth::generate_sequence(cfg)?.frames),
        FrameSource::None => Err(Error::validation(&record.name, "sequence has no frame source")),
    }
}

impl FrameAnnotation {
    pub fn new(frame_index: usize, bbox: BoundingBox, image_size: (u32, u32)) -> Self {
        Self {
            frame_index,
            bbox,
            image_width: image_size.0,
            image_height: image_size.1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_seq(root: &Path, name: &str, gt: &str, attrs: &str, meta: &str) {
        let d = root.join(name);
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join(GROUNDTRUTH), gt).unwrap();
        fs::write(d.join(ATTRIBUTES), attrs).unwrap();
        fs::write(d.join(META), meta).unwrap();
    }

    const ATTRS: &str = "0,1,0,0,0,0,0,0,0,0,0,1\n";

    #[test]
    fn loads_well_formed_sequences() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = "12.34,5.60,7.00,8.00\n13.00,6.00,7.00,8.00\n";
        write_seq(tmp.path(), "a", gt, ATTRS, "class=bird\nwidth=64\nheight=48\n");
        write_seq(tmp.path(), "b", gt, ATTRS, "class=car\nwidth=64\nheight=48\nframes=2\n");
        let report = load_manifest(tmp.path()).unwrap();
        assert!(report.is_clean(), "{:?}", report.errors);
        assert_eq!(report.manifest.len(), 2);
        let a = report.manifest.get("a").unwrap();
        assert_eq!(a.class_label, "bird");
        assert!(a.attributes.has(Attribute::FM) && a.attributes.has(Attribute::LI));
        assert_eq!(format_groundtruth(&a.boxes()), gt);
    }

    #[test]
    fn reports_broken_sequences_by_name() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = "1.00,1.00,4.00,4.00\n";
        write_seq(tmp.path(), "good", gt, ATTRS, "class=c\nwidth=32\nheight=32\n");
        write_seq(
            tmp.path(),
            "short",
            gt,
            "0,0,0,0,0,0,0,0,0,0,0\n",
            "class=c\nwidth=32\nheight=32\n",
        );
        write_seq(
            tmp.path(),
            "count",
            gt,
            ATTRS,
            "class=c\nwidth=32\nheight=32\nframes=3\n",
        );
        fs::create_dir_all(tmp.path().join("missing")).unwrap();
        let report = load_manifest(tmp.path()).unwrap();
        assert_eq!(report.manifest.len(), 1);
        let msgs: Vec<String> = report.errors.iter().map(|e| e.to_string()).collect();
        assert_eq!(msgs.len(), 3, "{msgs:?}");
        let short = msgs.iter().find(|m| m.starts_with("short")).unwrap();
        assert!(short.contains("expected 12"), "{short}");
        assert!(msgs
            .iter()
            .any(|m| m.starts_with("count") && m.contains("1 annotations for 3 frames")));
        assert!(msgs.iter().any(|m| m.starts_with("missing")));
    }

    #[test]
    fn manifest_round_trip_with_splits() {
        let tmp = tempfile::tempdir().unwrap();
        let b = BoundingBox::new(2.5, 3.25, 6.0, 5.5).unwrap();
        let mut r = SequenceRecord::from_boxes("x", "drone", &[b, b.translate(1.0, 0.0)], (40, 30)).unwrap();
        r.attributes = AttributeVector::default().with(Attribute::SV);
        let mut m = DatasetManifest::new(vec![r]).unwrap();
        m.set_split("x", SplitTag::Test).unwrap();
        write_manifest(tmp.path(), &m).unwrap();
        let back = load_manifest(tmp.path()).unwrap();
        assert!(back.is_clean());
        assert_eq!(back.manifest, m);
    }
}
