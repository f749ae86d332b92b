use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tinytrack::dataset::{
    dataset_stats, is_tiny, load_frames, load_manifest, load_sequence, parse_groundtruth, split_manifest,
    write_sequence, write_splits, DatasetManifest, SequenceRecord, SplitTag,
};
use tinytrack::degrade::{batch_scale_factor, choose_upsampler, degrade_with, DegradeSpec, Upsampler};
use tinytrack::distill::{train, DistillMode, LoadedVideo, LossWeights, StepLog, TrainConfig, VideoSource};
use tinytrack::imaging::{load_image, save_png};
use tinytrack::metrics::{attribute_report, rank_trackers, read_results, write_plots, write_results, TrackResult};
use tinytrack::model::{load_checkpoint, save_checkpoint, NetConfig, ParamGroup, TrackerNet};
use tinytrack::synth::{generate_named, Motion, Occluder, SynthConfig};
use tinytrack::tracker::{track_sequence, TrackerConfig};

use crate::config::{key, usage, Key, RunConfig};

/// Process exit status of a subcommand that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    ValidationFailed,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_clean(root: &Path) -> Result<DatasetManifest> {
    let report = load_manifest(root)?;
    if let Some(e) = report.errors.first() {
        bail!(
            "{} sequence(s) under {} failed to load, first: {e}; run `validate` for the full list",
            report.errors.len(),
            root.display()
        );
    }
    if report.manifest.is_empty() {
        bail!("no sequences found under {}", root.display());
    }
    Ok(report.manifest)
}

fn split_filter(cfg: &RunConfig) -> Result<Option<SplitTag>> {
    match cfg.raw("split") {
        "all" => Ok(None),
        s => match SplitTag::parse(s) {
            Some(t) => Ok(Some(t)),
            None => usage(format!("split must be all, train, test or unassigned, got `{s}`")),
        },
    }
}

fn select<'a>(manifest: &'a DatasetManifest, tag: Option<SplitTag>) -> Vec<&'a SequenceRecord> {
    manifest
        .iter()
        .filter(|(_, t)| tag.is_none_or(|want| *t == want))
        .map(|(s, _)| s)
        .collect()
}

pub const STATS_KEYS: &[Key] = &[];

pub fn stats(_cfg: &RunConfig, data: &Path, out: &Path) -> Result<Outcome> {
    let manifest = load_clean(data)?;
    let st = dataset_stats(&manifest);
    let tiny = manifest.sequences().iter().filter(|s| is_tiny(s)).count();
    let mut text = st.to_string();
    writeln!(text, "tiny videos   {tiny}")?;
    writeln!(text, "classes:")?;
    for (class, n) in &st.class_histogram {
        writeln!(text, "  {class:<12} {n}")?;
    }
    print!("{text}");
    write_file(&out.join("stats.txt"), &text)?;
    write_file(&out.join("stats.json"), &serde_json::to_string_pretty(&st)?)?;
    Ok(Outcome::Ok)
}

pub const VALIDATE_KEYS: &[Key] = &[];

pub fn validate(_cfg: &RunConfig, data: &Path, out: &Path) -> Result<Outcome> {
    let report = load_manifest(data)?;
    let mut text = format!(
        "{} sequences loaded, {} errors\n",
        report.manifest.len(),
        report.errors.len()
    );
    for e in &report.errors {
        writeln!(text, "{e}")?;
    }
    print!("{text}");
    write_file(&out.join("validation.txt"), &text)?;
    Ok(if report.is_clean() {
        Outcome::Ok
    } else {
        Outcome::ValidationFailed
    })
}

pub const SPLIT_KEYS: &[Key] = &[
    key("test_count", "0", "number of sequences tagged test"),
    key(
        "test_pool",
        "",
        "file with one candidate name per line; unset = every sequence",
    ),
    key("in_place", "false", "also write splits.txt into the dataset directory"),
];

pub fn split(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Outcome> {
    let manifest = load_clean(data)?;
    let pool: Vec<String> = match cfg.opt::<PathBuf>("test_pool")? {
        Some(p) => fs::read_to_string(&p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => manifest.sequences().iter().map(|s| s.name.clone()).collect(),
    };
    let split = split_manifest(&manifest, &pool, cfg.get("test_count")?, cfg.seed())?;
    write_splits(&out.join("splits.txt"), &split)?;
    if cfg.get::<bool>("in_place")? {
        write_splits(&data.join("splits.txt"), &split)?;
    }
    let train = split.with_split(SplitTag::Train).count();
    let test = split.with_split(SplitTag::Test).count();
    println!("{test} test / {train} train");
    Ok(Outcome::Ok)
}

pub const SYNTH_KEYS: &[Key] = &[
    key("count", "10", "number of sequences"),
    key("prefix", "seq", "sequence name prefix"),
    key("frames", "60", "frames per sequence"),
    key("width", "320", "image width"),
    key("height", "240", "image height"),
    key("object_size", "16", "sprite side in pixels"),
    key("motion", "linear", "linear, abrupt or fast"),
    key("speed", "2", "pixels per frame"),
    key("blur", "0", "motion-blur radius"),
    key("occluder_period", "0", "occluder cycle in frames; 0 disables"),
    key("occluder_duration", "0", "occluded frames per cycle"),
    key("distractors", "0", "similar objects in the scene"),
    key("illumination_drop", "1", "brightness reached at the last frame"),
    key("scale_rate", "1", "per-frame size multiplier"),
    key("out_of_view", "false", "let the target leave the image partly"),
    key("clutter", "false", "target-coloured background patches"),
    key("class", "sprite", "class label"),
    key("mix", "false", "give each sequence one extra challenge in rotation"),
    key("images", "true", "write per-frame PNGs"),
];

fn synth_base(cfg: &RunConfig) -> Result<SynthConfig> {
    let motion = match Motion::parse(cfg.raw("motion")) {
        Some(m) => m,
        None => {
            return usage(format!(
                "motion must be linear, abrupt or fast, got `{}`",
                cfg.raw("motion")
            ))
        }
    };
    let period: usize = cfg.get("occluder_period")?;
    Ok(SynthConfig {
        image_size: (cfg.get("width")?, cfg.get("height")?),
        object_size: cfg.get("object_size")?,
        motion,
        speed: cfg.get("speed")?,
        blur_strength: cfg.get("blur")?,
        occluder: (period > 0).then_some(Occluder {
            period,
            duration: cfg.get("occluder_duration")?,
        }),
        distractor_count: cfg.get("distractors")?,
        illumination_drop: cfg.get("illumination_drop")?,
        frames: cfg.get("frames")?,
        seed: 0,
        scale_rate: cfg.get("scale_rate")?,
        allow_out_of_view: cfg.get("out_of_view")?,
        background_clutter: cfg.get("clutter")?,
        class_label: cfg.raw("class").to_string(),
    })
}

/// Challenge rotation used by `mix`; index 0 leaves the base untouched.
fn with_challenge(mut c: SynthConfig, i: usize) -> SynthConfig {
    match i % 9 {
        1 => c.speed = c.object_size * 1.5,
        2 => c.blur_strength = c.blur_strength.max(3),
        3 => {
            c.occluder = Some(Occluder {
                period: 30,
                duration: 8,
            })
        }
        4 => c.distractor_count += 2,
        5 => c.illumination_drop = c.illumination_drop.min(0.3),
        6 => c.scale_rate = 1.02,
        7 => {
            c.allow_out_of_view = true;
            c.speed = c.speed.max(3.0);
        }
        8 => {
            c.motion = Motion::Abrupt;
            c.background_clutter = true;
        }
        _ => {}
    }
    c
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let base = synth_base(cfg)?;
    let count: usize = cfg.get("count")?;
    let mix: bool = cfg.get("mix")?;
    let images: bool = cfg.get("images")?;
    let width = count.max(1).to_string().len();
    for i in 0..count {
        let mut c = if mix {
            with_challenge(base.clone(), i)
        } else {
            base.clone()
        };
        c.seed = cfg.seed().wrapping_mul(10_007).wrapping_add(i as u64);
        let name = format!("{}{:0width$}", cfg.raw("prefix"), i + 1);
        let seq = generate_named(&c, &name).map_err(|e| crate::config::UsageError(e.to_string()))?;
        write_sequence(out, &seq.record, images.then_some(seq.frames.as_slice()))?;
    }
    println!("wrote {count} sequences to {}", out.display());
    Ok(Outcome::Ok)
}

pub const DEGRADE_KEYS: &[Key] = &[
    key("scale_divisor", "16", "target side after downsampling"),
    key("input_size", "352", "output side"),
    key("upsampler", "random", "random, nearest or bilinear"),
];

pub fn degrade(cfg: &RunConfig, image: &Path, boxes: &Path, out: &Path) -> Result<Outcome> {
    let spec = DegradeSpec {
        scale_divisor: cfg.get("scale_divisor")?,
        network_input_size: cfg.get("input_size")?,
        seed: cfg.seed(),
    };
    let up = match cfg.raw("upsampler") {
        "random" => choose_upsampler(&spec, 0),
        "nearest" => Upsampler::Nearest,
        "bilinear" => Upsampler::Bilinear,
        s => return usage(format!("upsampler must be random, nearest or bilinear, got `{s}`")),
    };
    let text = fs::read_to_string(boxes).with_context(|| format!("reading {}", boxes.display()))?;
    let gt = parse_groundtruth(&text, boxes)?;
    if gt.is_empty() {
        bail!("{} holds no boxes", boxes.display());
    }
    let frame = load_image(image)?;
    let d = batch_scale_factor(&gt, &spec);
    let degraded = degrade_with(&frame, d, &spec, up)?;
    save_png(&degraded, &out.join("degraded.png"))?;
    let summary = format!(
        "factor {d:.4}\nupsampler {up:?}\nsize {0}x{0}\n",
        spec.network_input_size
    );
    print!("{summary}");
    write_file(&out.join("degrade.txt"), &summary)?;
    Ok(Outcome::Ok)
}

pub const TRAIN_KEYS: &[Key] = &[
    key("mode", "full", "none, full, feature, score or iou"),
    key(
        "teacher",
        "",
        "teacher checkpoint directory; required unless mode = none",
    ),
    key("init", "", "student initialization; unset = teacher, or fresh weights"),
    key(
        "split",
        "train",
        "sequences to train on: all, train, test or unassigned",
    ),
    key("epochs", "2", ""),
    key("videos_per_epoch", "50", "training pairs per epoch"),
    key("batch_size", "1", ""),
    key("channels", "16", "backbone width of a fresh network"),
    key("hidden", "32", "IoU-head width of a fresh network"),
    key("input_size", "352", "network input side of a fresh network"),
    key("n_iter", "5", "target-model iterations of a fresh network"),
    key("proposal_points", "7", "box-regression grid points per dimension"),
    key("degrade", "true", "feed the student degraded crops"),
    key("scale_divisor", "16", "degradation divisor"),
    key("dis_weight", "1", "discriminator loss scale"),
    key("w_cls", "100", "classification loss weight"),
    key("w_iou", "0.01", "box regression loss weight"),
    key("w_cons", "5", "feature consistency weight"),
    key("w_score", "2", "score distillation weight"),
    key("w_iou_d", "0.1", "IoU distillation weight"),
    key("lr_scale", "1", "multiplies every learning rate below"),
    key("lr_backbone_head", "0", ""),
    key("lr_backbone_tail", "5e-5", ""),
    key("lr_classifier", "5e-5", ""),
    key("lr_box", "5e-4", ""),
    key("lr_discriminator", "5e-4", ""),
    key("decay_factor", "0.2", "learning-rate multiplier per decay period"),
    key("decay_every", "15", "epochs per decay period"),
];

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let Some(mode) = DistillMode::parse(cfg.raw("mode")) else {
        return usage(format!("unknown mode `{}`", cfg.raw("mode")));
    };
    let mut t = TrainConfig {
        epochs: cfg.get("epochs")?,
        videos_per_epoch: cfg.get("videos_per_epoch")?,
        batch_size: cfg.get("batch_size")?,
        proposal_points: cfg.get("proposal_points")?,
        mode,
        degrade_inputs: cfg.get("degrade")?,
        dis_weight: cfg.get("dis_weight")?,
        weights: LossWeights {
            alpha: cfg.get("w_cls")?,
            beta: cfg.get("w_iou")?,
            gamma: cfg.get("w_cons")?,
            delta: cfg.get("w_score")?,
            eta: cfg.get("w_iou_d")?,
        },
        seed: cfg.seed(),
        ..TrainConfig::default()
    };
    t.degrade.scale_divisor = cfg.get("scale_divisor")?;
    t.degrade.seed = cfg.seed();
    t.adam.decay_factor = cfg.get("decay_factor")?;
    t.adam.decay_every = cfg.get("decay_every")?;
    let scale: f64 = cfg.get("lr_scale")?;
    for (g, k) in [
        (ParamGroup::BackboneHead, "lr_backbone_head"),
        (ParamGroup::BackboneTail, "lr_backbone_tail"),
        (ParamGroup::Classifier, "lr_classifier"),
        (ParamGroup::BoxRegressor, "lr_box"),
        (ParamGroup::Discriminator, "lr_discriminator"),
    ] {
        t.adam.lr.set(g, scale * cfg.get::<f64>(k)?);
    }
    if let Err(e) = t.validate() {
        return usage(e.to_string());
    }
    Ok(t)
}

fn history_csv(history: &[StepLog]) -> String {
    let mut s = String::from("step,epoch,total,cls,iou,gen,dis,cons,score_d,iou_d,rdm_cls,rdm_iou,degrade_factor\n");
    for h in history {
        let l = &h.losses;
        let _ = writeln!(
            s,
            "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.4}",
            h.step,
            h.epoch,
            l.total,
            l.cls,
            l.iou,
            l.gen,
            l.dis,
            l.cons,
            l.score_d,
            l.iou_d,
            h.gate.rdm_cls,
            h.gate.rdm_iou,
            h.degrade_factor
        );
    }
    s
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Outcome> {
    let tcfg = train_config(cfg)?;
    let teacher = match cfg.opt::<PathBuf>("teacher")? {
        Some(p) => Some(
            load_checkpoint(&p)
                .with_context(|| format!("loading teacher {}", p.display()))?
                .0,
        ),
        None if tcfg.mode != DistillMode::None => return usage("distillation modes need `teacher`"),
        None => None,
    };
    let init = match (cfg.opt::<PathBuf>("init")?, &teacher) {
        (Some(p), _) => {
            load_checkpoint(&p)
                .with_context(|| format!("loading {}", p.display()))?
                .0
        }
        (None, Some(t)) => t.clone(),
        (None, None) => {
            let net = NetConfig {
                channels: cfg.get("channels")?,
                hidden: cfg.get("hidden")?,
                input_size: cfg.get("input_size")?,
                n_iter: cfg.get("n_iter")?,
                ..NetConfig::default()
            };
            TrackerNet::new(net, cfg.seed()).map_err(|e| crate::config::UsageError(e.to_string()))?
        }
    };

    let manifest = load_clean(data)?;
    let videos = select(&manifest, split_filter(cfg)?)
        .into_iter()
        .map(|s| {
            Ok(LoadedVideo {
                frames: load_frames(s)?,
                boxes: s.boxes(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if videos.is_empty() {
        bail!("no sequences match split `{}`", cfg.raw("split"));
    }
    let sources: Vec<&dyn VideoSource> = videos.iter().map(|v| v as &dyn VideoSource).collect();
    eprintln!("training {} steps on {} videos", tcfg.total_steps(), videos.len());
    let outcome = train(&tcfg, init, teacher.as_ref(), &sources)?;
    let meta = save_checkpoint(
        out,
        &outcome.student,
        cfg.seed(),
        outcome.history.len() as u64,
        tcfg.mode.as_str(),
    )?;
    write_file(&out.join("history.csv"), &history_csv(&outcome.history))?;
    if let Some(last) = outcome.history.last() {
        println!("final loss {:.6e}", last.losses.total);
    }
    println!("checkpoint {} ({})", out.display(), meta.checksum);
    Ok(Outcome::Ok)
}

pub const TRACK_KEYS: &[Key] = &[
    key("model", "", "checkpoint directory (required)"),
    key("name", "tinytrack", "tracker name written into the results"),
    key("split", "all", "sequences to track when given a dataset root"),
    key("update_iters", "5", "target-model iterations per update"),
    key("init_iters", "10", "target-model iterations on the first frame"),
    key("update_interval", "20", "frames between scheduled updates"),
    key(
        "interference_ratio",
        "0.5",
        "secondary/main peak ratio that forces an update",
    ),
    key("search_area_factor", "5", "search crop side over target side"),
    key("refine_steps", "10", "box refinement ascent steps"),
    key("memory_capacity", "50", "stored training samples"),
];

fn tracker_config(cfg: &RunConfig) -> Result<TrackerConfig> {
    let t = TrackerConfig {
        update_iters: cfg.get("update_iters")?,
        init_iters: cfg.get("init_iters")?,
        update_interval: cfg.get("update_interval")?,
        interference_ratio: cfg.get("interference_ratio")?,
        search_area_factor: cfg.get("search_area_factor")?,
        refine_steps: cfg.get("refine_steps")?,
        memory_capacity: cfg.get("memory_capacity")?,
        ..TrackerConfig::default()
    };
    if let Err(e) = t.validate() {
        return usage(e.to_string());
    }
    Ok(t)
}

pub fn track(cfg: &RunConfig, path: &Path, out: &Path) -> Result<Outcome> {
    let Some(model) = cfg.opt::<PathBuf>("model")? else {
        return usage("`track` needs `model`");
    };
    let tcfg = tracker_config(cfg)?;
    let (net, _) = load_checkpoint(&model).with_context(|| format!("loading {}", model.display()))?;
    let single;
    let manifest;
    let records: Vec<&SequenceRecord> = if path.join("groundtruth.txt").is_file() {
        single = load_sequence(path)?;
        vec![&single]
    } else {
        manifest = load_clean(path)?;
        select(&manifest, split_filter(cfg)?)
    };
    let mut results: Vec<TrackResult> = Vec::with_capacity(records.len());
    for rec in records {
        let frames = load_frames(rec)?;
        let gt = rec.boxes();
        let (res, st) = track_sequence(&net, &tcfg, &frames, &gt[0], cfg.raw("name"), &rec.name)?;
        eprintln!(
            "{}: {} frames, {} scheduled / {} interference updates",
            rec.name, st.frames, st.scheduled_updates, st.interference_updates
        );
        results.push(res);
    }
    write_results(&out.join("results.json"), &results)?;
    println!("tracked {} sequences", results.len());
    Ok(Outcome::Ok)
}

pub const EVAL_KEYS: &[Key] = &[];

fn gather(results: &[PathBuf]) -> Result<Vec<TrackResult>> {
    if results.is_empty() {
        return usage("pass at least one --results file");
    }
    let mut all = Vec::new();
    for p in results {
        all.extend(read_results(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(all)
}

pub fn eval(_cfg: &RunConfig, results: &[PathBuf], data: &Path, out: &Path) -> Result<Outcome> {
    let manifest = load_clean(data)?;
    let report = attribute_report(&gather(results)?, &manifest)?;
    write_file(&out.join("results.csv"), &report.to_csv())?;
    write_plots(out, &report)?;
    let mut text = format!("{:<16}{:>8}{:>8}{:>8}{:>6}\n", "tracker", "PR", "NPR", "SR", "seqs");
    for r in &report.rows {
        let o = &r.overall;
        writeln!(
            text,
            "{:<16}{:>8.3}{:>8.3}{:>8.3}{:>6}",
            r.tracker, o.pr, o.npr, o.sr, o.sequences
        )?;
    }
    print!("{text}");
    write_file(&out.join("summary.txt"), &text)?;
    Ok(Outcome::Ok)
}

pub const REPORT_KEYS: &[Key] = &[];

pub fn report(_cfg: &RunConfig, results: &[PathBuf], data: &Path, out: &Path) -> Result<Outcome> {
    let manifest = load_clean(data)?;
    let report = attribute_report(&gather(results)?, &manifest)?;
    let mut md = String::from("# Tracker report\n\n## Ranking by SR\n\n| rank | tracker | SR |\n|---|---|---|\n");
    for (i, (name, sr)) in rank_trackers(&report).iter().enumerate() {
        writeln!(md, "| {} | {name} | {sr:.3} |", i + 1)?;
    }
    md.push_str("\n## Overall\n\n| tracker | PR | NPR | SR |\n|---|---|---|---|\n");
    for r in &report.rows {
        let o = &r.overall;
        writeln!(md, "| {} | {:.3} | {:.3} | {:.3} |", r.tracker, o.pr, o.npr, o.sr)?;
    }
    md.push_str("\n## SR per attribute\n\n```\n");
    md.push_str(&report.sr_table());
    md.push_str("```\n");
    write_file(&out.join("report.md"), &md)?;
    write_file(&out.join("attributes.csv"), &report.to_csv())?;
    print!("{}", report.sr_table());
    Ok(Outcome::Ok)
}
