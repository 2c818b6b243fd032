//! Shared test support: scalar-loop brute-force oracles for the loss math,
//! written in plain f64 with no tensor-engine code, plus random-instance
//! helpers. The oracles follow the same reduction convention as the library
//! (squared-denominator Dice, sums over batch and space per channel, mean
//! over channels, epsilon on numerator and denominator).

#![allow(dead_code)]

use condist_core::losses::LabelField;
use condist_core::tensor::Tensor;
use condist_core::topology::ClassTopology;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CE_CLAMP: f64 = 1e-7;
pub const COND_FLOOR: f64 = 1e-7;

/// One-voxel softmax with temperature.
pub fn oracle_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&x| x / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn argmax_lowest_tie(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Soft Dice loss between two probability fields with an optional voxel mask,
/// all scalar loops.
pub fn oracle_soft_dice(
    p: &[f64],
    q: &[f64],
    dims: (usize, usize, usize, usize),
    mask: Option<&[bool]>,
    eps: f64,
) -> f64 {
    let (b, c, h, w) = dims;
    let hw = h * w;
    let mut dice_sum = 0.0;
    for ci in 0..c {
        let mut num = 0.0;
        let mut dp = 0.0;
        let mut dq = 0.0;
        for bi in 0..b {
            for v in 0..hw {
                if let Some(m) = mask {
                    if !m[bi * hw + v] {
                        continue;
                    }
                }
                let pv = p[(bi * c + ci) * hw + v];
                let qv = q[(bi * c + ci) * hw + v];
                num += pv * qv;
                dp += pv * pv;
                dq += qv * qv;
            }
        }
        dice_sum += (2.0 * num + eps) / (dp + dq + eps);
    }
    1.0 - dice_sum / c as f64
}

/// Mean cross-entropy of a probability field against a one-hot field.
pub fn oracle_cross_entropy(p: &[f64], onehot: &[f64], dims: (usize, usize, usize, usize)) -> f64 {
    let (b, c, h, w) = dims;
    let hw = h * w;
    let mut total = 0.0;
    for bi in 0..b {
        for v in 0..hw {
            for ci in 0..c {
                if onehot[(bi * c + ci) * hw + v] > 0.5 {
                    total += -(p[(bi * c + ci) * hw + v].max(CE_CLAMP)).ln();
                }
            }
        }
    }
    total / (b * hw) as f64
}

pub fn oracle_dice_ce(
    p: &[f64],
    onehot: &[f64],
    dims: (usize, usize, usize, usize),
    eps: f64,
) -> f64 {
    oracle_soft_dice(p, onehot, dims, None, eps) + oracle_cross_entropy(p, onehot, dims)
}

/// Full supervised marginal loss from logits: voxelwise softmax at tau = 1,
/// merge of non-foreground probabilities into channel 0, DiceCE against the
/// merged one-hot label.
pub fn oracle_marginal_dice_ce(
    logits: &[f64],
    label: &[u8],
    dims: (usize, usize, usize, usize),
    foreground: &[usize],
    eps: f64,
) -> f64 {
    let (b, n, h, w) = dims;
    let hw = h * w;
    let c_merged = 1 + foreground.len();
    let mut merged = vec![0.0f64; b * c_merged * hw];
    let mut onehot = vec![0.0f64; b * c_merged * hw];
    for bi in 0..b {
        for v in 0..hw {
            let voxel: Vec<f64> = (0..n).map(|c| logits[(bi * n + c) * hw + v]).collect();
            let probs = oracle_softmax(&voxel, 1.0);
            for (c, &pv) in probs.iter().enumerate() {
                let ch = match foreground.iter().position(|&f| f == c) {
                    Some(rank) => 1 + rank,
                    None => 0,
                };
                merged[(bi * c_merged + ch) * hw + v] += pv;
            }
            let lab = label[bi * hw + v] as usize;
            let ch = match foreground.iter().position(|&f| f == lab) {
                Some(rank) => 1 + rank,
                None => 0,
            };
            onehot[(bi * c_merged + ch) * hw + v] = 1.0;
        }
    }
    oracle_dice_ce(&merged, &onehot, (b, c_merged, h, w), eps)
}

/// Standard (non-marginal) DiceCE over the full class space from logits.
pub fn oracle_standard_dice_ce(
    logits: &[f64],
    label: &[u8],
    dims: (usize, usize, usize, usize),
    eps: f64,
) -> f64 {
    let (b, n, h, w) = dims;
    let hw = h * w;
    let mut probs = vec![0.0f64; logits.len()];
    let mut onehot = vec![0.0f64; logits.len()];
    for bi in 0..b {
        for v in 0..hw {
            let voxel: Vec<f64> = (0..n).map(|c| logits[(bi * n + c) * hw + v]).collect();
            for (c, pv) in oracle_softmax(&voxel, 1.0).into_iter().enumerate() {
                probs[(bi * n + c) * hw + v] = pv;
            }
            onehot[(bi * n + label[bi * hw + v] as usize) * hw + v] = 1.0;
        }
    }
    oracle_dice_ce(&probs, &onehot, dims, eps)
}

/// Conditional distillation loss by scalar loops: temperature softmax on both
/// branches, foreground merge, background grouping, conditional
/// renormalization, foreground filtering, then masked soft Dice.
#[allow(clippy::too_many_arguments)]
pub fn oracle_condist(
    student_logits: &[f64],
    teacher_logits: &[f64],
    label: &[u8],
    dims: (usize, usize, usize, usize),
    foreground: &[usize],
    groups: &[Vec<usize>],
    tau: f64,
    eps: f64,
) -> f64 {
    let (b, n, h, w) = dims;
    let hw = h * w;
    let m = groups.len();
    let mut num = vec![0.0f64; m];
    let mut den_s = vec![0.0f64; m];
    let mut den_t = vec![0.0f64; m];
    let mut kept = 0usize;
    for bi in 0..b {
        for v in 0..hw {
            let sv: Vec<f64> = (0..n).map(|c| student_logits[(bi * n + c) * hw + v]).collect();
            let tv: Vec<f64> = (0..n).map(|c| teacher_logits[(bi * n + c) * hw + v]).collect();
            let lab = label[bi * hw + v] as usize;
            let teacher_pred = argmax_lowest_tie(&tv);
            if foreground.contains(&lab) || foreground.contains(&teacher_pred) {
                continue;
            }
            kept += 1;
            let ps = oracle_softmax(&sv, tau);
            let pt = oracle_softmax(&tv, tau);
            let pf_s: f64 = foreground.iter().map(|&c| ps[c]).sum();
            let pf_t: f64 = foreground.iter().map(|&c| pt[c]).sum();
            let denom_s = (1.0 - pf_s).max(COND_FLOOR);
            let denom_t = (1.0 - pf_t).max(COND_FLOOR);
            for (gi, g) in groups.iter().enumerate() {
                let cs: f64 = g.iter().map(|&c| ps[c]).sum::<f64>() / denom_s;
                let ct: f64 = g.iter().map(|&c| pt[c]).sum::<f64>() / denom_t;
                num[gi] += cs * ct;
                den_s[gi] += cs * cs;
                den_t[gi] += ct * ct;
            }
        }
    }
    if kept == 0 {
        return 0.0;
    }
    let mut dice_sum = 0.0;
    for gi in 0..m {
        dice_sum += (2.0 * num[gi] + eps) / (den_s[gi] + den_t[gi] + eps);
    }
    1.0 - dice_sum / m as f64
}

// ---------------------------------------------------------------------------
// Random-instance helpers
// ---------------------------------------------------------------------------

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + rng.gen::<f64>() * (hi - lo)).collect()
}

pub fn random_vec_f32(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| lo + rng.gen::<f32>() * (hi - lo)).collect()
}

pub fn random_label(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), n_classes: usize) -> LabelField {
    let (b, h, w) = dims;
    let data: Vec<u8> = (0..b * h * w).map(|_| rng.gen_range(0..n_classes) as u8).collect();
    LabelField::new(vec![b, h, w], data).unwrap()
}

pub fn tensor_f64(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::constant(data, shape).unwrap()
}

pub fn tensor_f32(data: Vec<f32>, shape: &[usize]) -> Tensor<f32> {
    Tensor::constant(data, shape).unwrap()
}

/// Topologies over 8 classes with 0..=3 unlabeled-organ groups.
pub fn topologies_by_group_count() -> Vec<(usize, ClassTopology)> {
    vec![
        // M = 0: everything except background is foreground.
        (0, ClassTopology::new(8, (1..8).collect(), vec![vec![0]]).unwrap()),
        // M = 1
        (1, ClassTopology::new(8, vec![1, 2, 3, 4, 5], vec![vec![0], vec![6, 7]]).unwrap()),
        // M = 2
        (2, ClassTopology::new(8, vec![1, 2, 3], vec![vec![0], vec![4, 5], vec![6, 7]]).unwrap()),
        // M = 3 (the toy client-A layout)
        (
            3,
            ClassTopology::new(8, vec![1, 2], vec![vec![0], vec![3, 4], vec![5, 6], vec![7]])
                .unwrap(),
        ),
    ]
}
