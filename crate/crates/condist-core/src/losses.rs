//! Loss stack for partial-label segmentation with conditional distillation.
//!
//! Supervised path: per-voxel softmax, merge of all non-foreground
//! probabilities into one channel, then Dice + cross-entropy against the
//! merged one-hot label.
//!
//! Distillation path: temperature softmax on both student and teacher,
//! foreground merging, background grouping, renormalization conditional on
//! "not foreground", a voxel filter that drops ground-truth and
//! teacher-predicted foreground, and a soft Dice loss between the masked
//! conditional fields. The total loss adds the distillation term with a
//! round-scheduled weight.
//!
//! Dice convention used everywhere (and mirrored by the brute-force oracles
//! in the test suites): squared-denominator soft Dice, sums taken jointly
//! over batch and spatial dims per channel, mean over channels, epsilon added
//! to numerator and denominator.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{
    channel_gather, cond_background, numel, real, select_mask, softmax_channels, Mask, Real,
    Tensor,
};
use crate::topology::ClassTopology;

/// Probabilities below this are clamped before the cross-entropy log.
pub const CE_CLAMP: f64 = 1e-7;

/// Floor applied to the conditional-background denominator `1 - p_F` so that
/// confident-foreground voxels (which the filter removes anyway) cannot
/// produce non-finite values in the forward pass.
pub const COND_FLOOR: f64 = 1e-7;

/// Distillation hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig<F: Real> {
    /// Softmax temperature for both branches. Default 0.5 sharpens the
    /// distributions.
    pub temperature: F,
    /// Epsilon added to the soft-Dice numerator and denominator.
    pub dice_epsilon: F,
    /// Distillation weight at round 0.
    pub weight_start: f64,
    /// Distillation weight at the final round.
    pub weight_end: f64,
    /// Total federated rounds the weight ramps over.
    pub total_rounds: usize,
}

impl<F: Real> DistillConfig<F> {
    pub fn new(total_rounds: usize) -> Self {
        DistillConfig {
            temperature: real(0.5),
            dice_epsilon: real(1e-5),
            weight_start: 0.01,
            weight_end: 1.0,
            total_rounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= F::zero() {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(0.0..=self.weight_end).contains(&self.weight_start) {
            return Err(Error::InvalidConfig(
                "weight_start must satisfy 0 <= weight_start <= weight_end".into(),
            ));
        }
        if self.total_rounds == 0 {
            return Err(Error::InvalidConfig("total_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

impl<F: Real> Default for DistillConfig<F> {
    fn default() -> Self {
        Self::new(1)
    }
}

// ---------------------------------------------------------------------------
// Label fields and one-hot encodings
// ---------------------------------------------------------------------------

/// Class-index label over `[B, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelField {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl LabelField {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if shape.len() != 3 || numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "label_field",
                lhs: shape,
                rhs: alloc::vec![data.len()],
            });
        }
        Ok(LabelField { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Nearest-neighbour decimation by an integer factor (top-left sample),
    /// used to supervise lower-resolution heads. Preserves the one-hot
    /// property since no interpolation happens.
    pub fn downsample(&self, factor: usize) -> LabelField {
        assert!(factor >= 1);
        let (b, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (nh, nw) = (h / factor, w / factor);
        let mut data = Vec::with_capacity(b * nh * nw);
        for bi in 0..b {
            for i in 0..nh {
                for j in 0..nw {
                    data.push(self.data[bi * h * w + (i * factor) * w + j * factor]);
                }
            }
        }
        LabelField { shape: alloc::vec![b, nh, nw], data }
    }
}

/// One-hot encoding over the full class space, `[B, N, H, W]`.
pub fn onehot_full<F: Real>(label: &LabelField, num_classes: usize) -> Result<Tensor<F>> {
    let (b, h, w) = (label.shape[0], label.shape[1], label.shape[2]);
    let hw = h * w;
    let mut data = alloc::vec![F::zero(); b * num_classes * hw];
    for bi in 0..b {
        for v in 0..hw {
            let c = label.data[bi * hw + v] as usize;
            if c >= num_classes {
                return Err(Error::BadTopology(alloc::format!(
                    "label value {c} out of range for {num_classes} classes"
                )));
            }
            data[(bi * num_classes + c) * hw + v] = F::one();
        }
    }
    Tensor::constant(data, &[b, num_classes, h, w])
}

/// One-hot encoding in the marginal space: channel 0 collects every
/// non-foreground class, channels 1.. follow the foreground in ascending
/// class order.
pub fn onehot_merged<F: Real>(label: &LabelField, topo: &ClassTopology) -> Result<Tensor<F>> {
    let (b, h, w) = (label.shape[0], label.shape[1], label.shape[2]);
    let hw = h * w;
    let channels = topo.merged_channels();
    let mut data = alloc::vec![F::zero(); b * channels * hw];
    for bi in 0..b {
        for v in 0..hw {
            let c = label.data[bi * hw + v] as usize;
            if c >= topo.num_classes() {
                return Err(Error::BadTopology(alloc::format!(
                    "label value {c} out of range for {} classes",
                    topo.num_classes()
                )));
            }
            let ch = match topo.foreground().binary_search(&c) {
                Ok(rank) => 1 + rank,
                Err(_) => 0,
            };
            data[(bi * channels + ch) * hw + v] = F::one();
        }
    }
    Tensor::constant(data, &[b, channels, h, w])
}

// ---------------------------------------------------------------------------
// Probability transforms
// ---------------------------------------------------------------------------

/// Per-voxel class probabilities from logits at temperature `tau`.
/// `tau = 1` is the plain softmax; the distillation branches use `tau = 0.5`.
pub fn softmax_probs<F: Real>(logits: &Tensor<F>, tau: F) -> Result<Tensor<F>> {
    if tau <= F::zero() {
        return Err(Error::InvalidConfig("softmax temperature must be positive".into()));
    }
    softmax_channels(logits, tau)
}

/// Merge all non-foreground probabilities into channel 0; foreground channels
/// follow in ascending class order. Total probability per voxel is preserved.
pub fn marginal_merge<F: Real>(probs: &Tensor<F>, topo: &ClassTopology) -> Result<Tensor<F>> {
    check_channels(probs, topo)?;
    let mut groups: Vec<Vec<usize>> = alloc::vec![topo.background()];
    for &f in topo.foreground() {
        groups.push(alloc::vec![f]);
    }
    channel_gather(probs, &groups)
}

/// Total foreground probability per voxel, `[B, 1, H, W]`.
pub fn merge_foreground<F: Real>(probs: &Tensor<F>, topo: &ClassTopology) -> Result<Tensor<F>> {
    check_channels(probs, topo)?;
    channel_gather(probs, &[topo.foreground().to_vec()])
}

/// Per-group background probabilities in group order, `[B, M+1, H, W]`.
/// Group sums plus the merged foreground equal 1 per voxel by partition.
pub fn group_background<F: Real>(probs: &Tensor<F>, topo: &ClassTopology) -> Result<Tensor<F>> {
    check_channels(probs, topo)?;
    channel_gather(probs, topo.background_groups())
}

/// Background-group probabilities conditional on "not foreground":
/// each group channel divided by `max(1 - p_F, 1e-7)`.
pub fn conditional_background<F: Real>(
    grouped: &Tensor<F>,
    p_foreground: &Tensor<F>,
) -> Result<Tensor<F>> {
    cond_background(grouped, p_foreground, real(COND_FLOOR))
}

fn check_channels<F: Real>(probs: &Tensor<F>, topo: &ClassTopology) -> Result<()> {
    let s = probs.shape();
    if s.len() != 4 || s[1] != topo.num_classes() {
        return Err(Error::ShapeMismatch {
            op: "class channels",
            lhs: s.to_vec(),
            rhs: alloc::vec![topo.num_classes()],
        });
    }
    Ok(())
}

/// Voxels kept by the distillation loss: neither labeled foreground in the
/// ground truth nor predicted foreground by the teacher (argmax over
/// channels, ties toward the lowest class index).
pub fn foreground_filter<F: Real>(
    label: &LabelField,
    teacher_probs: &Tensor<F>,
    topo: &ClassTopology,
) -> Result<Mask> {
    check_channels(teacher_probs, topo)?;
    let pred = teacher_probs.argmax_axis(1)?;
    if pred.shape() != label.shape() {
        return Err(Error::ShapeMismatch {
            op: "foreground_filter",
            lhs: pred.shape().to_vec(),
            rhs: label.shape().to_vec(),
        });
    }
    let keep: Vec<bool> = label
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&l, &p)| !topo.is_foreground(l as usize) && !topo.is_foreground(p as usize))
        .collect();
    Mask::new(label.shape().to_vec(), keep)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Squared-denominator soft Dice loss between two probability fields:
/// `1 - mean_c (2*sum(pq) + eps) / (sum(p^2) + sum(q^2) + eps)`, sums over
/// batch and space.
pub fn soft_dice_loss<F: Real>(p: &Tensor<F>, q: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    if p.shape() != q.shape() || p.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "soft_dice",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let per_channel = |t: &Tensor<F>| -> Result<Tensor<F>> {
        // [B,C,H,W] -> [C,H,W] -> [C,W] -> [C]
        t.sum_axis(0)?.sum_axis(1)?.sum_axis(1)
    };
    let num = per_channel(&p.mul(q)?)?.mul_scalar(real(2.0)).add_scalar(eps);
    let den = per_channel(&p.square())?
        .add(&per_channel(&q.square())?)?
        .add_scalar(eps);
    let dice = num.div(&den)?;
    Ok(dice.mean_all().neg().add_scalar(F::one()))
}

/// Mean cross-entropy over voxels: `-log` of the probability at the true
/// channel, clamped at 1e-7.
fn cross_entropy<F: Real>(probs: &Tensor<F>, onehot: &Tensor<F>) -> Result<Tensor<F>> {
    let picked = probs.clamp_min(real(CE_CLAMP)).log().mul(onehot)?;
    let s = probs.shape();
    let voxels = s[0] * s[2] * s[3];
    Ok(picked.sum_all().mul_scalar(real(-1.0 / voxels as f64)))
}

/// Supervised loss: soft Dice plus cross-entropy between merged probabilities
/// and the merged one-hot label.
pub fn dice_ce_loss<F: Real>(
    merged_probs: &Tensor<F>,
    onehot_label: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    if merged_probs.shape() != onehot_label.shape() || merged_probs.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "dice_ce",
            lhs: merged_probs.shape().to_vec(),
            rhs: onehot_label.shape().to_vec(),
        });
    }
    validate_onehot(onehot_label)?;
    let dice = soft_dice_loss(merged_probs, onehot_label, eps)?;
    let ce = cross_entropy(merged_probs, onehot_label)?;
    dice.add(&ce)
}

fn validate_onehot<F: Real>(onehot: &Tensor<F>) -> Result<()> {
    let s = onehot.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = onehot.data();
    for bi in 0..b {
        for v in 0..hw {
            let mut sum = 0.0f64;
            for ci in 0..c {
                sum += d[(bi * c + ci) * hw + v].to_f64().unwrap_or(f64::NAN);
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::LabelNotOneHot { voxel: bi * hw + v, sum });
            }
        }
    }
    Ok(())
}

/// Conditional distillation loss between a student and a detached teacher.
///
/// Both branches go through temperature softmax, foreground merging,
/// background grouping, and conditional renormalization; the foreground
/// filter then zeroes ground-truth and teacher-predicted foreground voxels on
/// both sides before the soft Dice. An empty filter yields exactly 0.
pub fn condist_loss<F: Real>(
    student_logits: &Tensor<F>,
    teacher_logits: &Tensor<F>,
    label: &LabelField,
    topo: &ClassTopology,
    cfg: &DistillConfig<F>,
) -> Result<Tensor<F>> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "condist branches",
            lhs: student_logits.shape().to_vec(),
            rhs: teacher_logits.shape().to_vec(),
        });
    }
    if teacher_logits.requires_grad() {
        return Err(Error::InvalidConfig(
            "teacher logits must be detached before condist_loss".into(),
        ));
    }
    cfg.validate()?;

    let p_student = softmax_probs(student_logits, cfg.temperature)?;
    let p_teacher = softmax_probs(teacher_logits, cfg.temperature)?;

    let cond_s = conditional_background(
        &group_background(&p_student, topo)?,
        &merge_foreground(&p_student, topo)?,
    )?;
    let cond_t = conditional_background(
        &group_background(&p_teacher, topo)?,
        &merge_foreground(&p_teacher, topo)?,
    )?;

    let mask = foreground_filter(label, &p_teacher, topo)?;
    if mask.kept() == 0 {
        return Ok(Tensor::scalar_value(F::zero()));
    }
    let masked_s = select_mask(&cond_s, &mask)?;
    let masked_t = select_mask(&cond_t, &mask)?;
    soft_dice_loss(&masked_s, &masked_t, cfg.dice_epsilon)
}

/// Distillation weight for a 0-based round index: linear from `weight_start`
/// to `weight_end` across `total_rounds`. A single-round schedule emits
/// `weight_end`.
pub fn schedule_weight<F: Real>(round: usize, cfg: &DistillConfig<F>) -> Result<f64> {
    let total = cfg.total_rounds;
    if round >= total {
        return Err(Error::StepOutOfRange { index: round, total });
    }
    if total == 1 || round == total - 1 {
        return Ok(cfg.weight_end);
    }
    if round == 0 {
        return Ok(cfg.weight_start);
    }
    Ok(cfg.weight_start + (cfg.weight_end - cfg.weight_start) * round as f64 / (total - 1) as f64)
}

/// Scheduled total loss: `sup + w * condist`. Gradient flows to both terms.
pub fn total_loss<F: Real>(sup: &Tensor<F>, condist: &Tensor<F>, w: F) -> Result<Tensor<F>> {
    if w < F::zero() {
        return Err(Error::InvalidConfig("condist weight must be non-negative".into()));
    }
    sup.add(&condist.mul_scalar(w))
}
