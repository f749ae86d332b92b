//! Teacher-student training: adversarial and consistency distillation of ROI
//! features, L1 distillation of score maps and IoU scores, and the reliability
//! gates that switch each term off when the teacher does no better than the
//! student.

mod train;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{ensure_finite, Error, Result};
use crate::model::{he_init, zeros, ParamGroup, ParamStore};

pub use train::{
    crop_pair, gated_distill_terms, pretrain_teacher, train, train_step, DistillInputs, DistillMode, LoadedVideo,
    SampleSet, StepLog, TrainConfig, TrainOutcome, TrainState, VideoSource,
};

/// `max(0, student - teacher)`, used as a constant multiplier.
pub fn rdm(student_loss: f64, teacher_loss: f64) -> Result<f64> {
    ensure_finite("student loss", student_loss)?;
    ensure_finite("teacher loss", teacher_loss)?;
    Ok((student_loss - teacher_loss).max(0.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillGate {
    pub rdm_iou: f64,
    pub rdm_cls: f64,
}

impl DistillGate {
    pub fn from_losses(student: (f64, f64), teacher: (f64, f64)) -> Result<Self> {
        Ok(Self {
            rdm_cls: rdm(student.0, teacher.0)?,
            rdm_iou: rdm(student.1, teacher.1)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 0.01,
            gamma: 5.0,
            delta: 2.0,
            eta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta, self.eta];
        if all.iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(())
        } else {
            Err(Error::Argument(format!("loss weights must be positive, got {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls: f64,
    pub iou: f64,
    pub gen: f64,
    pub dis: f64,
    pub cons: f64,
    pub score_d: f64,
    pub iou_d: f64,
    pub total: f64,
}

/// `a L_cls + b L_iou + g_iou L_gen + c g_iou L_cons + d g_cls L_score + e g_iou L_iou_d`.
pub fn total_loss(parts: &LossBundle, gates: &DistillGate, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("L_cls", parts.cls),
        ("L_iou", parts.iou),
        ("L_gen", parts.gen),
        ("L_cons", parts.cons),
        ("L_score_d", parts.score_d),
        ("L_iou_d", parts.iou_d),
        ("RDM_iou", gates.rdm_iou),
        ("RDM_cls", gates.rdm_cls),
    ] {
        ensure_finite(name, v)?;
    }
    Ok(w.alpha * parts.cls
        + w.beta * parts.iou
        + gates.rdm_iou * parts.gen
        + w.gamma * gates.rdm_iou * parts.cons
        + w.delta * gates.rdm_cls * parts.score_d
        + w.eta * gates.rdm_iou * parts.iou_d)
}

fn check_pairs(what: &str, s: &[Tensor], t: &[Tensor]) -> Result<()> {
    if s.is_empty() || s.len() != t.len() {
        return Err(Error::Shape(format!(
            "{what}: {} student vs {} teacher items",
            s.len(),
            t.len()
        )));
    }
    for (a, b) in s.iter().zip(t) {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
        }
    }
    Ok(())
}

fn batch_l1(s: &[Tensor], t: &[Tensor]) -> f64 {
    let total: f64 = s.iter().zip(t).map(|(a, b)| (a - b).mapv(f64::abs).sum()).sum();
    total / s.len() as f64
}

/// `(1/N) Σ ‖S_i - T_i‖₁` over ROI features.
pub fn consistency_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    check_pairs("consistency loss", student, teacher)?;
    Ok(batch_l1(student, teacher))
}

/// `(1/N) Σ ‖S_i - T_i‖₁` over score maps.
pub fn score_distill_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    check_pairs("score distillation", student, teacher)?;
    Ok(batch_l1(student, teacher))
}

/// `(1/N) Σ |s_i - t_i|`.
pub fn iou_distill_loss(student: &[f64], teacher: &[f64]) -> Result<f64> {
    if student.is_empty() || student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "IoU distillation: {} vs {} scores",
            student.len(),
            teacher.len()
        )));
    }
    Ok(student.iter().zip(teacher).map(|(s, t)| (s - t).abs()).sum::<f64>() / student.len() as f64)
}

/// Tape form of the batch L1 average; every pair must share a shape.
pub fn batch_l1_var(tape: &mut Tape, student: &[Var], teacher: &[Var]) -> Var {
    assert!(!student.is_empty() && student.len() == teacher.len());
    let terms: Vec<Var> = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            let d = tape.sub(s, t);
            let a = tape.abs(d);
            tape.sum(a)
        })
        .collect();
    let total = tape.add_all(&terms);
    tape.scale(total, 1.0 / student.len() as f64)
}

/// Tape form of the IoU distillation loss over flat score vectors.
pub fn iou_distill_var(tape: &mut Tape, student: &[Var], teacher: &[Var]) -> Var {
    let n: usize = student.iter().map(|&s| tape.shape(s).iter().product::<usize>()).sum();
    let sum = batch_l1_var(tape, student, teacher);
    tape.scale(sum, student.len() as f64 / n as f64)
}

/// `-Σ log D(S_i)` from discriminator logits.
pub fn gen_loss_var(tape: &mut Tape, student_logits: Var) -> Var {
    let l = tape.log_sigmoid(student_logits);
    let s = tape.sum(l);
    tape.neg(s)
}

/// `-Σ (log D(T_i) + log(1 - D(S_i)))` from logits; `1 - σ(x) = σ(-x)`.
pub fn dis_loss_var(tape: &mut Tape, teacher_logits: Var, student_logits: Var) -> Var {
    let lt = tape.log_sigmoid(teacher_logits);
    let neg = tape.neg(student_logits);
    let ls = tape.log_sigmoid(neg);
    let a = tape.sum(lt);
    let b = tape.sum(ls);
    let both = tape.add(a, b);
    tape.neg(both)
}

pub const DISCRIMINATOR_WIDTHS: [usize; 2] = [256, 64];
pub const LEAKY_SLOPE: f64 = 0.1;

/// Three fully connected layers from a flattened ROI feature to a logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub input_dim: usize,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Argument("discriminator input must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = [input_dim, DISCRIMINATOR_WIDTHS[0], DISCRIMINATOR_WIDTHS[1], 1];
        for (i, w) in dims.windows(2).enumerate() {
            let g = ParamGroup::Discriminator;
            params.push(
                &format!("disc.fc{}.weight", i + 1),
                g,
                he_init(&mut rng, &[w[0], w[1]], w[0]),
            );
            params.push(&format!("disc.fc{}.bias", i + 1), g, zeros(&[w[1]]));
        }
        Ok(Self { input_dim, params })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, |_| trainable)
    }

    /// Logits `[N, 1]` for features `[N, input_dim]`.
    pub fn logits_var(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let mut h = x;
        for layer in 0..3 {
            h = tape.linear(h, vars[2 * layer], vars[2 * layer + 1]);
            if layer < 2 {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }

    fn stack(&self, rois: &[Tensor]) -> Result<Tensor> {
        if rois.is_empty() {
            return Err(Error::Argument("discriminator needs a non-empty batch".into()));
        }
        let mut flat = Vec::with_capacity(rois.len() * self.input_dim);
        for r in rois {
            if r.len() != self.input_dim {
                return Err(Error::Shape(format!(
                    "ROI of {} values for a {}-input discriminator",
                    r.len(),
                    self.input_dim
                )));
            }
            flat.extend(r.iter().copied());
        }
        Ok(ArrayD::from_shape_vec(IxDyn(&[rois.len(), self.input_dim]), flat).unwrap())
    }

    pub fn logits(&self, rois: &[Tensor]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(self.stack(rois)?);
        let l = self.logits_var(&mut tape, &vars, x);
        let out: Vec<f64> = tape.value(l).iter().copied().collect();
        for &v in &out {
            ensure_finite("discriminator logit", v)?;
        }
        Ok(out)
    }

    /// `D(x)` in `(0, 1)`.
    pub fn probabilities(&self, rois: &[Tensor]) -> Result<Vec<f64>> {
        Ok(self.logits(rois)?.into_iter().map(crate::autograd::sigmoid).collect())
    }

    /// Stacked `[N, input_dim]` constant for a batch of ROI tensors.
    pub fn batch_var(&self, tape: &mut Tape, rois: &[Tensor]) -> Result<Var> {
        Ok(tape.constant(self.stack(rois)?))
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -crate::autograd::softplus(-x)
}

/// `-Σ log D(S_i)`.
pub fn gen_loss(d: &Discriminator, student_rois: &[Tensor]) -> Result<f64> {
    let l = d.logits(student_rois)?;
    Ok(-l.iter().map(|&x| log_sigmoid(x)).sum::<f64>())
}

/// `-Σ (log D(T_i) + log(1 - D(S_i)))`.
pub fn dis_loss(d: &Discriminator, teacher_rois: &[Tensor], student_rois: &[Tensor]) -> Result<f64> {
    if teacher_rois.len() != student_rois.len() {
        return Err(Error::Shape(format!(
            "discriminator batches differ: {} teacher vs {} student",
            teacher_rois.len(),
            student_rois.len()
        )));
    }
    let lt = d.logits(teacher_rois)?;
    let ls = d.logits(student_rois)?;
    Ok(-lt
        .iter()
        .zip(&ls)
        .map(|(&t, &s)| log_sigmoid(t) + log_sigmoid(-s))
        .sum::<f64>())
}

/// Stacks `[1, D]` ROI vars into `[N, D]` on the tape.
pub(crate) fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Var {
    let d = tape.shape(rows[0]).iter().product::<usize>();
    let flat = tape.concat_flat(rows);
    tape.reshape(flat, &[rows.len(), d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn rois(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Tensor> {
        (0..n)
            .map(|_| ArrayD::from_shape_fn(IxDyn(&[1, d]), |_| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    /// A discriminator whose last layer is zeroed outputs exactly 0.5.
    fn half_discriminator(d: usize) -> Discriminator {
        let mut disc = Discriminator::new(d, 1).unwrap();
        for p in disc.params.params_mut().iter_mut().skip(4) {
            p.value.fill(0.0);
        }
        disc
    }

    #[test]
    fn rdm_examples() {
        assert_relative_eq!(rdm(0.7, 0.5).unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(rdm(0.5, 0.7).unwrap(), 0.0);
        assert_eq!(rdm(0.3, 0.3).unwrap(), 0.0);
        assert!(rdm(f64::NAN, 0.1).is_err());
        assert!(rdm(0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = half_discriminator(6);
        let s = rois(&mut rng, 4, 6);
        assert_relative_eq!(gen_loss(&d, &s).unwrap(), 4.0 * 2f64.ln(), epsilon = 1e-12);
        let t = rois(&mut rng, 2, 6);
        assert_relative_eq!(dis_loss(&d, &t, &s[..2]).unwrap(), 4.0 * 2f64.ln(), epsilon = 1e-12);
        assert!(dis_loss(&d, &t, &s).is_err());
        assert!(gen_loss(&d, &[]).is_err());

        let full = Discriminator::new(6, 3).unwrap();
        let doubled: Vec<Tensor> = s.iter().chain(&s).cloned().collect();
        assert_relative_eq!(
            gen_loss(&full, &doubled).unwrap(),
            2.0 * gen_loss(&full, &s).unwrap(),
            epsilon = 1e-12
        );
        for p in full.probabilities(&s).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn l1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rois(&mut rng, 3, 5);
        assert_eq!(consistency_loss(&t, &t).unwrap(), 0.0);
        let s: Vec<Tensor> = t.iter().map(|x| x + 1.0).collect();
        assert_relative_eq!(consistency_loss(&s, &t).unwrap(), 5.0, epsilon = 1e-12);
        assert_eq!(consistency_loss(&s, &t).unwrap(), consistency_loss(&t, &s).unwrap());
        let maps: Vec<Tensor> = (0..2).map(|_| ArrayD::from_elem(IxDyn(&[4, 4]), 0.3)).collect();
        let shifted: Vec<Tensor> = maps.iter().map(|m| m + 0.5).collect();
        assert_relative_eq!(score_distill_loss(&shifted, &maps).unwrap(), 8.0, epsilon = 1e-12);
        assert!(score_distill_loss(&maps, &t[..2]).is_err());
        assert_relative_eq!(
            iou_distill_loss(&[0.9, 0.5], &[0.7, 0.9]).unwrap(),
            0.3,
            epsilon = 1e-12
        );
        assert_eq!(
            iou_distill_loss(&[0.9, 0.5], &[0.7, 0.9]).unwrap(),
            iou_distill_loss(&[0.7, 0.9], &[0.9, 0.5]).unwrap()
        );
        assert!(iou_distill_loss(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let ones = LossBundle {
            cls: 1.0,
            iou: 1.0,
            gen: 1.0,
            dis: 1.0,
            cons: 1.0,
            score_d: 1.0,
            iou_d: 1.0,
            total: 0.0,
        };
        let on = DistillGate {
            rdm_iou: 1.0,
            rdm_cls: 1.0,
        };
        assert!((total_loss(&ones, &on, &w).unwrap() - 108.11).abs() < 1e-9);
        let off = DistillGate::default();
        assert_relative_eq!(total_loss(&ones, &off, &w).unwrap(), 100.01, epsilon = 1e-12);
        let twice = DistillGate { rdm_cls: 2.0, ..on };
        assert_relative_eq!(
            total_loss(&ones, &twice, &w).unwrap() - total_loss(&ones, &on, &w).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        let bad = LossBundle { cons: f64::NAN, ..ones };
        assert!(total_loss(&bad, &on, &w).is_err());
        assert!(LossWeights { beta: 0.0, ..w }.validate().is_err());
    }

    #[test]
    fn tape_forms_match_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, t) = (rois(&mut rng, 3, 6), rois(&mut rng, 3, 6));
        let disc = Discriminator::new(6, 5).unwrap();
        let mut tape = Tape::new();
        let vars = disc.bind(&mut tape, false);
        let sv: Vec<Var> = s.iter().map(|x| tape.constant(x.clone())).collect();
        let tv: Vec<Var> = t.iter().map(|x| tape.constant(x.clone())).collect();
        let cons = batch_l1_var(&mut tape, &sv, &tv);
        assert_relative_eq!(tape.item(cons), consistency_loss(&s, &t).unwrap(), epsilon = 1e-12);
        let iou = iou_distill_var(&mut tape, &sv, &tv);
        let flat = |x: &[Tensor]| x.iter().flat_map(|r| r.iter().copied()).collect::<Vec<_>>();
        assert_relative_eq!(
            tape.item(iou),
            iou_distill_loss(&flat(&s), &flat(&t)).unwrap(),
            epsilon = 1e-12
        );
        let xs = stack_rows(&mut tape, &sv);
        let xt = stack_rows(&mut tape, &tv);
        let ls = disc.logits_var(&mut tape, &vars, xs);
        let lt = disc.logits_var(&mut tape, &vars, xt);
        let g = gen_loss_var(&mut tape, ls);
        assert_relative_eq!(tape.item(g), gen_loss(&disc, &s).unwrap(), epsilon = 1e-12);
        let d = dis_loss_var(&mut tape, lt, ls);
        assert_relative_eq!(tape.item(d), dis_loss(&disc, &t, &s).unwrap(), epsilon = 1e-12);
    }
}
