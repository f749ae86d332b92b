//! Parameter storage and the toy tracker network shared by teacher and student.
//!
//! Layout: a stride-16 convolutional backbone, a classification-feature
//! convolution feeding the online target model, and an IoU head working on
//! precise-pooled backbone features.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig, LearningRates};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

/// Total backbone stride in pixels.
pub const STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// First two backbone blocks; frozen by default.
    BackboneHead,
    BackboneTail,
    /// Classification features feeding the target model.
    Classifier,
    /// IoU head.
    BoxRegressor,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::BackboneHead,
        ParamGroup::BackboneTail,
        ParamGroup::Classifier,
        ParamGroup::BoxRegressor,
        ParamGroup::Discriminator,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, group: ParamGroup, value: Tensor) -> usize {
        assert!(self.index_of(name).is_none(), "duplicate parameter `{name}`");
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, groups, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([p.group.code()]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        let mut out = String::with_capacity(64);
        for b in h.finalize() {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }

    /// Puts every parameter on `tape`; groups for which `trainable` holds
    /// become leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable(p.group) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// He-normal weights for a layer with `fan_in` inputs.
pub(crate) fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Backbone output channels.
    pub channels: usize,
    /// IoU-head hidden width.
    pub hidden: usize,
    /// Square network input side; must be a multiple of the stride.
    pub input_size: usize,
    /// Target-model filter side.
    pub filter_size: usize,
    /// Regularization weight of the target model.
    pub lambda: f64,
    /// Steepest-descent iterations for the target model.
    pub n_iter: usize,
    /// Gaussian label width in feature cells.
    pub label_sigma: f64,
    /// Label value above which a cell counts as target region.
    pub mask_threshold: f64,
    pub roi_bins: usize,
    pub roi_samples: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            hidden: 32,
            input_size: 352,
            filter_size: 3,
            lambda: 0.1,
            n_iter: 5,
            label_sigma: 1.0,
            mask_threshold: 0.05,
            roi_bins: 3,
            roi_samples: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Argument(m));
        if !(1..=256).contains(&self.channels) || self.hidden == 0 {
            return fail(format!(
                "bad widths: channels {}, hidden {}",
                self.channels, self.hidden
            ));
        }
        if self.input_size == 0 || self.input_size % STRIDE != 0 {
            return fail(format!(
                "input_size {} is not a positive multiple of {STRIDE}",
                self.input_size
            ));
        }
        if self.filter_size % 2 == 0 {
            return fail(format!("filter_size must be odd, got {}", self.filter_size));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.label_sigma > 0.0) {
            return fail("lambda must be >= 0 and label_sigma > 0".into());
        }
        if self.roi_bins == 0 || self.roi_samples == 0 {
            return fail("roi_bins and roi_samples must be positive".into());
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / STRIDE
    }

    /// Width of a flattened pooled ROI.
    pub fn roi_dim(&self) -> usize {
        self.channels * self.roi_bins * self.roi_bins
    }
}

/// Parameter positions inside the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Ids {
    conv: [(usize, usize); 4],
    cls_w: usize,
    cls_b: usize,
    roi_w: usize,
    roi_b: usize,
    mod_w: usize,
    mod_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerNet {
    pub config: NetConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// Network parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct NetVars {
    vars: Vec<Var>,
    ids: Ids,
}

impl NetVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

const CONV_SPECS: [(&str, ParamGroup, usize, usize, usize); 4] = [
    // name, group, kernel, stride, padding
    ("backbone.conv1", ParamGroup::BackboneHead, 4, 4, 0),
    ("backbone.conv2", ParamGroup::BackboneHead, 3, 2, 1),
    ("backbone.conv3", ParamGroup::BackboneTail, 3, 2, 1),
    ("backbone.conv4", ParamGroup::BackboneTail, 3, 1, 1),
];

impl TrackerNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let widths = [(3, 8), (8, 16), (16, c), (c, c)];
        let mut store = ParamStore::new();
        let mut conv = [(0, 0); 4];
        for (i, ((name, group, k, _, _), (cin, cout))) in CONV_SPECS.iter().zip(widths).enumerate() {
            let w = store.push(
                &format!("{name}.weight"),
                *group,
                he_init(&mut rng, &[cout, cin, *k, *k], cin * k * k),
            );
            let b = store.push(&format!("{name}.bias"), *group, zeros(&[cout]));
            conv[i] = (w, b);
        }
        let cls_w = store.push(
            "classifier.conv.weight",
            ParamGroup::Classifier,
            he_init(&mut rng, &[c, c, 3, 3], 9 * c),
        );
        let cls_b = store.push("classifier.conv.bias", ParamGroup::Classifier, zeros(&[c]));
        let (d, h) = (config.roi_dim(), config.hidden);
        let g = ParamGroup::BoxRegressor;
        let roi_w = store.push("iou.roi.weight", g, he_init(&mut rng, &[d, h], d));
        let roi_b = store.push("iou.roi.bias", g, zeros(&[h]));
        let mod_w = store.push("iou.modulation.weight", g, he_init(&mut rng, &[d, h], d));
        let mod_b = store.push("iou.modulation.bias", g, zeros(&[h]));
        let out_w = store.push("iou.out.weight", g, he_init(&mut rng, &[h, 1], h).mapv(|v| v * 0.1));
        let out_b = store.push("iou.out.bias", g, zeros(&[1]));
        Ok(Self {
            config,
            params: store,
            ids: Ids {
                conv,
                cls_w,
                cls_b,
                roi_w,
                roi_b,
                mod_w,
                mod_b,
                out_w,
                out_b,
            },
        })
    }

    /// Rebuilds a network around loaded parameters, checking names and shapes.
    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (a, b) in template.params.params().iter().zip(params.params()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected `{}` {:?}, found `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> NetVars {
        NetVars {
            vars: self.params.bind(tape, trainable),
            ids: self.ids,
        }
    }

    /// Every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> NetVars {
        self.bind(tape, |_| false)
    }

    fn check_input(&self, tape: &Tape, image: Var) -> Result<()> {
        let n = self.config.input_size;
        if tape.shape(image) != [3, n, n] {
            return Err(Error::Shape(format!(
                "network input must be [3, {n}, {n}], got {:?}",
                tape.shape(image)
            )));
        }
        Ok(())
    }

    /// Backbone features `[C, H/16, W/16]` of a `[3, H, W]` image.
    pub fn backbone(&self, tape: &mut Tape, v: &NetVars, image: Var) -> Result<Var> {
        self.check_input(tape, image)?;
        let mut x = image;
        for (i, (_, _, _, stride, pad)) in CONV_SPECS.iter().enumerate() {
            let (w, b) = v.ids.conv[i];
            x = tape.conv2d(x, v.vars[w], Some(v.vars[b]), *stride, *pad);
            x = tape.relu(x);
        }
        Ok(x)
    }

    /// Classification features for the target model.
    pub fn cls_features(&self, tape: &mut Tape, v: &NetVars, feat: Var) -> Var {
        tape.conv2d(feat, v.vars[v.ids.cls_w], Some(v.vars[v.ids.cls_b]), 1, 1)
    }

    /// Modulation vector `[hidden]` from the reference ROI.
    pub fn iou_modulation(&self, tape: &mut Tape, v: &NetVars, ref_feat: Var, ref_box: Var) -> Var {
        let roi = tape.prpool(ref_feat, ref_box, self.config.roi_bins, self.config.roi_samples);
        let flat = tape.reshape(roi, &[1, self.config.roi_dim()]);
        let m = tape.linear(flat, v.vars[v.ids.mod_w], v.vars[v.ids.mod_b]);
        tape.reshape(m, &[self.config.hidden])
    }

    /// Head scores `[K]` for candidate boxes `[K, 4]` given a modulation vector.
    pub fn iou_scores(&self, tape: &mut Tape, v: &NetVars, modulation: Var, feat: Var, boxes: Var) -> Var {
        let k = tape.shape(boxes)[0];
        let roi = tape.prpool(feat, boxes, self.config.roi_bins, self.config.roi_samples);
        let flat = tape.reshape(roi, &[k, self.config.roi_dim()]);
        let hid = tape.linear(flat, v.vars[v.ids.roi_w], v.vars[v.ids.roi_b]);
        let hid = tape.relu(hid);
        let joint = tape.mul_row(hid, modulation);
        let s = tape.linear(joint, v.vars[v.ids.out_w], v.vars[v.ids.out_b]);
        tape.reshape(s, &[k])
    }

    /// Flattened pooled ROI `[1, roi_dim]`, the feature-level distillation unit.
    pub fn roi_feature(&self, tape: &mut Tape, feat: Var, bbox: Var) -> Var {
        let roi = tape.prpool(feat, bbox, self.config.roi_bins, self.config.roi_samples);
        tape.reshape(roi, &[1, self.config.roi_dim()])
    }

    /// Copies gradients for this network's parameters out of `grads`.
    pub fn collect_grads(&self, v: &NetVars, grads: &mut crate::autograd::Gradients) -> Vec<Option<Tensor>> {
        v.vars.iter().map(|&var| grads.take(var)).collect()
    }

    /// Number of scalars per parameter group.
    pub fn group_sizes(&self) -> BTreeMap<ParamGroup, usize> {
        let mut m = BTreeMap::new();
        for p in self.params.params() {
            *m.entry(p.group).or_insert(0) += p.value.len();
        }
        m
    }
}
