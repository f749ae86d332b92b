use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::bbox::BoundingBox;
use crate::degrade::{batch_scale_factor, choose_upsampler, degrade_with, DegradeSpec};
use crate::distill::{
    batch_l1_var, consistency_loss, dis_loss_var, gen_loss_var, iou_distill_loss, iou_distill_var, score_distill_loss,
    stack_rows, total_loss, Discriminator, DistillGate, LossBundle, LossWeights,
};
use crate::error::{ensure_finite, Error, Result};
use crate::imaging::{to_tensor, CropWindow, Frame};
use crate::model::{Adam, AdamConfig, NetVars, TrackerNet, STRIDE};
use crate::synth::SynthScene;
use crate::tracker::{
    box_from_params, boxes_to_cells, classification_loss_var, features_on_tape, kl_loss_var, label_density, BoxGrid,
    LabelMap, ModelProblem,
};

/// Frames and ground truth that training pairs are cut from.
pub trait VideoSource: Sync {
    fn len(&self) -> usize;
    fn frame(&self, t: usize) -> Result<Frame>;
    fn target(&self, t: usize) -> BoundingBox;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl VideoSource for SynthScene {
    fn len(&self) -> usize {
        SynthScene::len(self)
    }

    fn frame(&self, t: usize) -> Result<Frame> {
        Ok(self.render(t).frame)
    }

    fn target(&self, t: usize) -> BoundingBox {
        self.target_box(t)
    }
}

/// A video held in memory.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BoundingBox>,
}

impl VideoSource for LoadedVideo {
    fn len(&self) -> usize {
        self.frames.len().min(self.boxes.len())
    }

    fn frame(&self, t: usize) -> Result<Frame> {
        Ok(self.frames[t].clone())
    }

    fn target(&self, t: usize) -> BoundingBox {
        self.boxes[t]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillMode {
    /// Only the tracking losses.
    None,
    Full,
    Feature,
    Score,
    Iou,
}

impl DistillMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "baseline" => Some(Self::None),
            "full" | "all" => Some(Self::Full),
            "feature" => Some(Self::Feature),
            "score" => Some(Self::Score),
            "iou" => Some(Self::Iou),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Full => "full",
            Self::Feature => "feature",
            Self::Score => "score",
            Self::Iou => "iou",
        }
    }

    fn feature(self) -> bool {
        matches!(self, Self::Full | Self::Feature)
    }

    fn score(self) -> bool {
        matches!(self, Self::Full | Self::Score)
    }

    fn iou(self) -> bool {
        matches!(self, Self::Full | Self::Iou)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Training pairs drawn per epoch.
    pub videos_per_epoch: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    /// Frames spanned by one training pair.
    pub max_gap: usize,
    pub search_area_factor: f64,
    /// Crop-centre jitter in units of the box's geometric-mean side.
    pub center_jitter: f64,
    /// Log-scale jitter of the crop side.
    pub scale_jitter: f64,
    /// Points per dimension of the box-regression grid.
    pub proposal_points: usize,
    pub proposal_range: f64,
    /// Random offset of the grid centre from the ground truth.
    pub proposal_jitter: f64,
    pub iou_label_sigma: f64,
    pub mode: DistillMode,
    /// Whether the student sees degraded crops.
    pub degrade_inputs: bool,
    pub degrade: DegradeSpec,
    pub weights: LossWeights,
    /// Scale of the discriminator loss relative to the student objective.
    pub dis_weight: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            videos_per_epoch: 50,
            batch_size: 1,
            train_frames: 2,
            test_frames: 1,
            max_gap: 10,
            search_area_factor: 5.0,
            center_jitter: 0.8,
            scale_jitter: 0.15,
            proposal_points: 7,
            proposal_range: 0.3,
            proposal_jitter: 0.1,
            iou_label_sigma: 0.15,
            mode: DistillMode::Full,
            degrade_inputs: true,
            degrade: DegradeSpec::default(),
            weights: LossWeights::default(),
            dis_weight: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_frames == 0 || self.test_frames == 0 || self.proposal_points < 2 {
            return Err(Error::Argument(
                "batch_size, train_frames and test_frames must be positive; proposal_points at least 2".into(),
            ));
        }
        if !(self.search_area_factor > 1.0) || !(self.proposal_range > 0.0) || !(self.iou_label_sigma > 0.0) {
            return Err(Error::Argument(
                "search_area_factor must exceed 1; proposal_range and iou_label_sigma must be positive".into(),
            ));
        }
        if !(self.center_jitter >= 0.0 && self.scale_jitter >= 0.0 && self.proposal_jitter >= 0.0) {
            return Err(Error::Argument("jitter amounts must be non-negative".into()));
        }
        if !(self.dis_weight >= 0.0 && self.dis_weight.is_finite()) {
            return Err(Error::Argument("dis_weight must be non-negative".into()));
        }
        self.weights.validate()?;
        self.degrade.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.videos_per_epoch.div_ceil(self.batch_size)
    }
}

/// One training pair: network-sized crops with boxes in crop pixels.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub train: Vec<(Frame, BoundingBox)>,
    pub test: Vec<(Frame, BoundingBox)>,
    /// Box-regression grid centre for each test crop.
    pub proposals: Vec<BoundingBox>,
}

impl SampleSet {
    fn all(&self) -> impl Iterator<Item = &(Frame, BoundingBox)> {
        self.train.iter().chain(&self.test)
    }
}

fn jittered_crop(
    video: &dyn VideoSource,
    t: usize,
    cfg: &TrainConfig,
    out: u32,
    rng: &mut ChaCha8Rng,
) -> Result<(Frame, BoundingBox)> {
    let gt = video.target(t);
    gt.validate()?;
    let side = (gt.w * gt.h).sqrt();
    let (cx, cy) = gt.center();
    let j = cfg.center_jitter * side;
    let jx = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
    let jy = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
    let s = cfg.scale_jitter;
    let k = if s > 0.0 { rng.gen_range(-s..=s).exp() } else { 1.0 };
    let window = CropWindow::new(cx + jx, cy + jy, cfg.search_area_factor * side * k, out);
    Ok((window.extract(&video.frame(t)?), window.frame_to_crop(&gt)))
}

/// Draws a training pair from `video`: frames within `max_gap` of each other,
/// cropped around jittered ground truth.
pub fn crop_pair(video: &dyn VideoSource, cfg: &TrainConfig, out: u32, rng: &mut ChaCha8Rng) -> Result<SampleSet> {
    let n = video.len();
    if n == 0 {
        return Err(Error::Argument("cannot sample from an empty video".into()));
    }
    let span = cfg.max_gap.max(1).min(n);
    let start = rng.gen_range(0..=n - span);
    let pick = |count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<(Frame, BoundingBox)>> {
        (0..count)
            .map(|_| {
                let t = start + rng.gen_range(0..span);
                jittered_crop(video, t, cfg, out, rng)
            })
            .collect()
    };
    let train = pick(cfg.train_frames, rng)?;
    let test = pick(cfg.test_frames, rng)?;
    let pj = cfg.proposal_jitter;
    let proposals = test
        .iter()
        .map(|(_, gt)| {
            let y = [0; 4].map(|_| if pj > 0.0 { rng.gen_range(-pj..=pj) } else { 0.0 });
            box_from_params(&y, gt)
        })
        .collect();
    Ok(SampleSet { train, test, proposals })
}

/// Everything one network produces for one training pair.
struct Forward {
    cls: Var,
    iou: Var,
    rois: Vec<Var>,
    scores: Vec<Var>,
    ious: Vec<Var>,
}

/// Plain values of a [`Forward`], used for the frozen teacher.
struct ForwardValues {
    cls: f64,
    iou: f64,
    rois: Vec<Tensor>,
    scores: Vec<Tensor>,
    ious: Vec<Tensor>,
}

impl ForwardValues {
    fn read(tape: &Tape, f: &Forward) -> Self {
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        Self {
            cls: tape.item(f.cls),
            iou: tape.item(f.iou),
            rois: grab(&f.rois),
            scores: grab(&f.scores),
            ious: grab(&f.ious),
        }
    }
}

fn cell_box(tape: &mut Tape, b: &BoundingBox) -> Var {
    tape.constant(boxes_to_cells(&[*b], STRIDE as f64))
}

fn forward(
    net: &TrackerNet,
    tape: &mut Tape,
    v: &NetVars,
    images: &[Tensor],
    set: &SampleSet,
    cfg: &TrainConfig,
) -> Result<Forward> {
    let nc = &net.config;
    let n = nc.feature_size();
    let s = STRIDE as f64;
    let mut feats = Vec::with_capacity(images.len());
    for img in images {
        feats.push(features_on_tape(net, tape, v, img.clone())?);
    }
    let boxes: Vec<BoundingBox> = set.all().map(|(_, b)| *b).collect();
    let label = |b: &BoundingBox| {
        let (cx, cy) = b.center();
        LabelMap::gaussian(n, n, (cx / s, cy / s), nc.label_sigma)
    };
    let m = set.train.len();
    let train_x: Vec<Var> = feats[..m].iter().map(|f| f.1).collect();
    let train_labels: Vec<LabelMap> = boxes[..m].iter().map(label).collect();
    let train_refs: Vec<&LabelMap> = train_labels.iter().collect();
    let weights = vec![1.0 / m as f64; m];
    let problem = ModelProblem {
        features: &train_x,
        labels: &train_refs,
        weights: &weights,
        lambda: nc.lambda,
        mask_threshold: nc.mask_threshold,
    };
    let f0 = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[
        1,
        nc.channels,
        nc.filter_size,
        nc.filter_size,
    ])));
    let iterates = problem.iterates(tape, f0, nc.n_iter);
    let test_labels: Vec<LabelMap> = boxes[m..].iter().map(label).collect();
    let test: Vec<(Var, &LabelMap)> = feats[m..].iter().map(|f| f.1).zip(&test_labels).collect();
    let cls = classification_loss_var(tape, &iterates, &test, nc.mask_threshold);

    let last = *iterates.last().unwrap();
    let pad = nc.filter_size / 2;
    let scores = feats[m..]
        .iter()
        .map(|f| tape.conv2d(f.1, last, None, 1, pad))
        .collect();

    let ref_box = cell_box(tape, &boxes[0]);
    let modulation = net.iou_modulation(tape, v, feats[0].0, ref_box);
    let mut kl_terms = Vec::new();
    let mut ious = Vec::new();
    for ((feat, gt), proposal) in feats[m..].iter().zip(&boxes[m..]).zip(&set.proposals) {
        let grid = BoxGrid::new(*proposal, cfg.proposal_points, cfg.proposal_range)?;
        let density = label_density(&grid, gt, cfg.iou_label_sigma)?;
        let cells = tape.constant(boxes_to_cells(&grid.boxes(), s));
        let sc = net.iou_scores(tape, v, modulation, feat.0, cells);
        kl_terms.push(kl_loss_var(tape, sc, &density, grid.cell_volume()));
        ious.push(sc);
    }
    let kl = tape.add_all(&kl_terms);
    let iou = tape.scale(kl, 1.0 / kl_terms.len() as f64);

    let rois = feats
        .iter()
        .zip(&boxes)
        .map(|(f, b)| {
            let bv = cell_box(tape, b);
            net.roi_feature(tape, f.0, bv)
        })
        .collect();
    Ok(Forward {
        cls,
        iou,
        rois,
        scores,
        ious,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub losses: LossBundle,
    pub gate: DistillGate,
    pub degrade_factor: f64,
}

/// Trainable state of one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: TrackerNet,
    pub discriminator: Discriminator,
    adam: Adam,
    disc_adam: Adam,
    pub steps: u64,
    images_seen: u64,
}

impl TrainState {
    pub fn new(student: TrackerNet, cfg: &TrainConfig) -> Result<Self> {
        let discriminator = Discriminator::new(student.config.roi_dim(), cfg.seed ^ 0xd15c)?;
        Ok(Self {
            adam: Adam::new(&student.params, cfg.adam.clone()),
            disc_adam: Adam::new(&discriminator.params, cfg.adam.clone()),
            student,
            discriminator,
            steps: 0,
            images_seen: 0,
        })
    }
}

fn mean(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// One optimizer step on a batch of pairs.
///
/// The teacher sees the crops as given, the student a degraded copy when
/// `cfg.degrade_inputs` is set. Reliability gates come from batch-mean
/// losses; a gated term whose gate is zero never enters the tape, so the
/// student gradient then equals the plain tracking-loss gradient exactly.
/// The discriminator is updated from the same forward pass. On a non-finite
/// loss or gradient nothing is updated.
pub fn train_step(
    state: &mut TrainState,
    teacher: Option<&TrackerNet>,
    batch: &[SampleSet],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::Argument("empty training batch".into()));
    }
    let distill = teacher.is_some() && cfg.mode != DistillMode::None;
    let gt_boxes: Vec<BoundingBox> = batch.iter().flat_map(|s| s.all().map(|(_, b)| *b)).collect();
    // upsample back to whatever the network takes
    let spec = DegradeSpec {
        network_input_size: state.student.config.input_size as u32,
        ..cfg.degrade
    };
    let d = if cfg.degrade_inputs {
        batch_scale_factor(&gt_boxes, &spec)
    } else {
        1.0
    };

    let mut student_images = Vec::with_capacity(batch.len());
    for set in batch {
        let mut imgs = Vec::new();
        for (frame, _) in set.all() {
            let img = if cfg.degrade_inputs {
                let up = choose_upsampler(&spec, state.images_seen);
                state.images_seen += 1;
                degrade_with(frame, d, &spec, up)?
            } else {
                frame.clone()
            };
            imgs.push(to_tensor(&img));
        }
        student_images.push(imgs);
    }

    let teacher_out = match teacher {
        Some(t) => {
            let mut outs = Vec::with_capacity(batch.len());
            for set in batch {
                let mut tape = Tape::new();
                let v = t.bind_frozen(&mut tape);
                let imgs: Vec<Tensor> = set.all().map(|(f, _)| to_tensor(f)).collect();
                let f = forward(t, &mut tape, &v, &imgs, set, cfg)?;
                outs.push(ForwardValues::read(&tape, &f));
            }
            Some(outs)
        }
        None => None,
    };

    let lr = &cfg.adam.lr;
    let mut tape = Tape::new();
    let v = state.student.bind(&mut tape, |g| lr.is_trainable(g));
    let mut fwd = Vec::with_capacity(batch.len());
    for (set, imgs) in batch.iter().zip(&student_images) {
        fwd.push(forward(&state.student, &mut tape, &v, imgs, set, cfg)?);
    }
    let b = batch.len() as f64;
    let cls_terms: Vec<Var> = fwd.iter().map(|f| f.cls).collect();
    let iou_terms: Vec<Var> = fwd.iter().map(|f| f.iou).collect();
    let cls_sum = tape.add_all(&cls_terms);
    let iou_sum = tape.add_all(&iou_terms);
    let cls = tape.scale(cls_sum, 1.0 / b);
    let iou = tape.scale(iou_sum, 1.0 / b);
    let (cls_v, iou_v) = (
        ensure_finite("L_cls", tape.item(cls))?,
        ensure_finite("L_iou", tape.item(iou))?,
    );

    let w = &cfg.weights;
    let mut bundle = LossBundle {
        cls: cls_v,
        iou: iou_v,
        ..LossBundle::default()
    };
    let mut gate = DistillGate::default();
    let mut terms = vec![tape.scale(cls, w.alpha), tape.scale(iou, w.beta)];

    let flat = |xs: &[Tensor]| xs.iter().flat_map(|t| t.iter().copied()).collect::<Vec<f64>>();
    let mut disc_batch: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
    if let Some(tv) = &teacher_out {
        let t_cls = mean(&tv.iter().map(|t| t.cls).collect::<Vec<_>>());
        let t_iou = mean(&tv.iter().map(|t| t.iou).collect::<Vec<_>>());
        gate = DistillGate::from_losses((cls_v, iou_v), (t_cls, t_iou))?;

        let s_rois: Vec<Var> = fwd.iter().flat_map(|f| f.rois.iter().copied()).collect();
        let t_rois: Vec<Tensor> = tv.iter().flat_map(|t| t.rois.iter().cloned()).collect();
        let s_scores: Vec<Var> = fwd.iter().flat_map(|f| f.scores.iter().copied()).collect();
        let t_scores: Vec<Tensor> = tv.iter().flat_map(|t| t.scores.iter().cloned()).collect();
        let s_ious: Vec<Var> = fwd.iter().flat_map(|f| f.ious.iter().copied()).collect();
        let t_ious: Vec<Tensor> = tv.iter().flat_map(|t| t.ious.iter().cloned()).collect();
        let values = |vs: &[Var]| vs.iter().map(|&x| tape.value(x).clone()).collect::<Vec<Tensor>>();
        let (s_roi_vals, s_score_vals, s_iou_vals) = (values(&s_rois), values(&s_scores), values(&s_ious));

        bundle.cons = consistency_loss(&s_roi_vals, &t_rois)?;
        bundle.score_d = score_distill_loss(&s_score_vals, &t_scores)?;
        bundle.iou_d = iou_distill_loss(&flat(&s_iou_vals), &flat(&t_ious))?;
        bundle.gen = crate::distill::gen_loss(&state.discriminator, &s_roi_vals)?;
        bundle.dis = crate::distill::dis_loss(&state.discriminator, &t_rois, &s_roi_vals)?;

        if distill {
            let inputs = DistillInputs {
                student_rois: &s_rois,
                teacher_rois: &t_rois,
                student_scores: &s_scores,
                teacher_scores: &t_scores,
                student_ious: &s_ious,
                teacher_ious: &t_ious,
            };
            terms.extend(gated_distill_terms(
                &mut tape,
                &state.discriminator,
                &inputs,
                gate,
                w,
                cfg.mode,
            ));
            if cfg.mode.feature() {
                disc_batch = Some((t_rois, s_roi_vals));
            }
        }
    }
    let total = tape.add_all(&terms);
    bundle.total = total_loss(&bundle, &effective_gate(gate, cfg.mode, distill), w)?;
    ensure_finite("L_tot", tape.item(total))?;

    let mut grads = tape.backward(total);
    let student_grads = state.student.collect_grads(&v, &mut grads);
    let disc_grads = match &disc_batch {
        Some((t_rois, s_rois)) => {
            let mut dt = Tape::new();
            let dv = state.discriminator.bind(&mut dt, true);
            let xt = state.discriminator.batch_var(&mut dt, t_rois)?;
            let xs = state.discriminator.batch_var(&mut dt, s_rois)?;
            let lt = state.discriminator.logits_var(&mut dt, &dv, xt);
            let ls = state.discriminator.logits_var(&mut dt, &dv, xs);
            let dis = dis_loss_var(&mut dt, lt, ls);
            let scaled = dt.scale(dis, cfg.dis_weight);
            ensure_finite("L_dis", dt.item(scaled))?;
            let mut g = dt.backward(scaled);
            Some(dv.iter().map(|&x| g.take(x)).collect::<Vec<_>>())
        }
        None => None,
    };
    // Validate everything before touching any parameter.
    for g in student_grads.iter().chain(disc_grads.iter().flatten()).flatten() {
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    state.adam.step(&mut state.student.params, &student_grads, epoch)?;
    if let Some(g) = disc_grads {
        state.disc_adam.step(&mut state.discriminator.params, &g, epoch)?;
    }
    state.steps += 1;
    Ok(StepLog {
        epoch,
        step: state.steps,
        losses: bundle,
        gate,
        degrade_factor: d,
    })
}

/// Student outputs on a tape next to the frozen teacher's values, matched
/// element for element.
pub struct DistillInputs<'a> {
    pub student_rois: &'a [Var],
    pub teacher_rois: &'a [Tensor],
    pub student_scores: &'a [Var],
    pub teacher_scores: &'a [Tensor],
    pub student_ious: &'a [Var],
    pub teacher_ious: &'a [Tensor],
}

/// Distillation terms of the student objective, already weighted and gated:
/// `g_iou L_gen`, `gamma g_iou L_cons`, `delta g_cls L_score`, `eta g_iou L_iou_d`,
/// restricted to `mode`. Terms whose gate is zero are left out entirely.
pub fn gated_distill_terms(
    tape: &mut Tape,
    disc: &Discriminator,
    inputs: &DistillInputs,
    gate: DistillGate,
    w: &LossWeights,
    mode: DistillMode,
) -> Vec<Var> {
    let constants = |tape: &mut Tape, ts: &[Tensor]| ts.iter().map(|t| tape.constant(t.clone())).collect::<Vec<Var>>();
    let mut terms = Vec::new();
    if mode.feature() && gate.rdm_iou > 0.0 {
        let dv = disc.bind(tape, false);
        let x = stack_rows(tape, inputs.student_rois);
        let logits = disc.logits_var(tape, &dv, x);
        let gen = gen_loss_var(tape, logits);
        terms.push(tape.scale(gen, gate.rdm_iou));
        let t = constants(tape, inputs.teacher_rois);
        let cons = batch_l1_var(tape, inputs.student_rois, &t);
        terms.push(tape.scale(cons, w.gamma * gate.rdm_iou));
    }
    if mode.score() && gate.rdm_cls > 0.0 {
        let t = constants(tape, inputs.teacher_scores);
        let sd = batch_l1_var(tape, inputs.student_scores, &t);
        terms.push(tape.scale(sd, w.delta * gate.rdm_cls));
    }
    if mode.iou() && gate.rdm_iou > 0.0 {
        let t = constants(tape, inputs.teacher_ious);
        let id = iou_distill_var(tape, inputs.student_ious, &t);
        terms.push(tape.scale(id, w.eta * gate.rdm_iou));
    }
    terms
}

/// Gates restricted to the terms the mode trains, for the logged total.
fn effective_gate(gate: DistillGate, mode: DistillMode, distill: bool) -> DistillGate {
    if !distill {
        return DistillGate::default();
    }
    DistillGate {
        rdm_iou: if mode.feature() || mode.iou() {
            gate.rdm_iou
        } else {
            0.0
        },
        rdm_cls: if mode.score() { gate.rdm_cls } else { 0.0 },
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub student: TrackerNet,
    pub discriminator: Discriminator,
    pub history: Vec<StepLog>,
}

/// Full training run. Pairs are drawn from a generator seeded by `cfg.seed`
/// alone, so runs that differ only in mode see identical data.
pub fn train(
    cfg: &TrainConfig,
    init: TrackerNet,
    teacher: Option<&TrackerNet>,
    videos: &[&dyn VideoSource],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let usable: Vec<&dyn VideoSource> = videos.iter().copied().filter(|v| !v.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Argument("no training videos".into()));
    }
    if let Some(t) = teacher {
        if t.config != init.config {
            return Err(Error::Argument("teacher and student architectures differ".into()));
        }
    }
    let out = init.config.input_size as u32;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::new(init, cfg)?;
    let mut history = Vec::with_capacity(cfg.total_steps());
    for epoch in 0..cfg.epochs {
        let mut remaining = cfg.videos_per_epoch;
        while remaining > 0 {
            let n = remaining.min(cfg.batch_size);
            remaining -= n;
            let batch = (0..n)
                .map(|_| {
                    let video = usable[data_rng.gen_range(0..usable.len())];
                    crop_pair(video, cfg, out, &mut data_rng)
                })
                .collect::<Result<Vec<_>>>()?;
            history.push(train_step(&mut state, teacher, &batch, cfg, epoch)?);
        }
    }
    Ok(TrainOutcome {
        student: state.student,
        discriminator: state.discriminator,
        history,
    })
}

/// Teacher training: tracking losses only, on undegraded crops.
pub fn pretrain_teacher(cfg: &TrainConfig, init: TrackerNet, videos: &[&dyn VideoSource]) -> Result<TrainOutcome> {
    let plain = TrainConfig {
        mode: DistillMode::None,
        degrade_inputs: false,
        ..cfg.clone()
    };
    train(&plain, init, None, videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use crate::synth::SynthConfig;

    fn small_net(seed: u64) -> TrackerNet {
        TrackerNet::new(
            NetConfig {
                channels: 4,
                hidden: 8,
                input_size: 64,
                ..NetConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn scene(seed: u64) -> SynthScene {
        SynthScene::new(&SynthConfig {
            frames: 12,
            object_size: 24.0,
            image_size: (96, 80),
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            videos_per_epoch: 2,
            proposal_points: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pair_sampling() {
        let s = scene(1);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = crop_pair(&s, &cfg, 64, &mut rng).unwrap();
        assert_eq!((set.train.len(), set.test.len(), set.proposals.len()), (2, 1, 1));
        for (f, b) in set.all() {
            assert_eq!(f.dimensions(), (64, 64));
            let side = (b.w * b.h).sqrt();
            assert!(
                (side * cfg.search_area_factor / 64.0 - 1.0).abs() < 0.2,
                "box side {side}"
            );
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let again = crop_pair(&s, &cfg, 64, &mut rng2).unwrap();
        assert_eq!(set.test[0].1, again.test[0].1);
    }

    #[test]
    fn gates_off_give_baseline_gradient() {
        let net = small_net(3);
        let s = scene(2);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = vec![crop_pair(&s, &cfg, 64, &mut rng).unwrap()];
        // The teacher is the student itself on undegraded input, so with
        // degradation off both losses tie and every gate is zero.
        let cfg = TrainConfig {
            degrade_inputs: false,
            ..cfg
        };
        let mut with_teacher = TrainState::new(net.clone(), &cfg).unwrap();
        let mut baseline = TrainState::new(net.clone(), &cfg).unwrap();
        let log = train_step(&mut with_teacher, Some(&net), &batch, &cfg, 0).unwrap();
        assert_eq!(log.gate, DistillGate::default());
        let plain = TrainConfig {
            mode: DistillMode::None,
            ..cfg.clone()
        };
        train_step(&mut baseline, None, &batch, &plain, 0).unwrap();
        assert_eq!(with_teacher.student.params, baseline.student.params);
        assert_ne!(with_teacher.student.params, net.params);
    }

    #[test]
    fn run_is_deterministic_and_teacher_frozen() {
        let teacher = small_net(7);
        let scenes = [scene(3), scene(4)];
        let videos: Vec<&dyn VideoSource> = scenes.iter().map(|s| s as &dyn VideoSource).collect();
        let cfg = small_cfg();
        let before = teacher.params.checksum();
        let a = train(&cfg, teacher.clone(), Some(&teacher), &videos).unwrap();
        let b = train(&cfg, teacher.clone(), Some(&teacher), &videos).unwrap();
        assert_eq!(teacher.params.checksum(), before);
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.history, b.history);
        assert_eq!(a.student.params, b.student.params);
        assert!(a
            .history
            .iter()
            .all(|h| h.losses.total.is_finite() && h.degrade_factor >= 1.0));
        assert_eq!(a.history.iter().map(|h| h.step).collect::<Vec<_>>(), vec![1, 2]);
    }
}
