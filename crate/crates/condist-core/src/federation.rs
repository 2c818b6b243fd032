//! Client-side local training and server-side aggregation rules.
//!
//! The round orchestration (threads, transport, logging) lives in the std
//! companion crate; everything here is deterministic single-threaded math
//! over in-memory datasets and checkpoints.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::checkpoint::Checkpoint;
use crate::data::{BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    condist_loss, dice_ce_loss, marginal_merge, onehot_full, onehot_merged, schedule_weight,
    softmax_probs, total_loss, DistillConfig, LabelField,
};
use crate::model::{deep_supervision_weights, SegNet, SegNetConfig};
use crate::tensor::{real, Tape, Tensor};
use crate::topology::ClassTopology;

/// Supervised loss flavor of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Standard DiceCE over the full class space; unlabeled organs are
    /// actively trained toward background (the pathology baseline).
    DiceCeStandard,
    /// Marginal DiceCE: non-foreground probabilities merged before the loss.
    Marginal,
    /// Marginal DiceCE plus the scheduled conditional distillation term.
    MarginalPlusCondist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorKind {
    FedAvg,
    FedOpt,
    /// FedAvg aggregation with a client-side proximal penalty.
    FedProx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    /// Server momentum for FedOpt.
    pub server_momentum: f64,
    /// Server learning rate for FedOpt.
    pub server_lr: f64,
    /// Proximal coefficient for FedProx clients.
    pub prox_mu: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            kind: AggregatorKind::FedAvg,
            server_momentum: 0.6,
            server_lr: 1.0,
            prox_mu: 0.01,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.server_momentum) {
            return Err(Error::InvalidConfig("server momentum must be in [0, 1)".into()));
        }
        if self.prox_mu < 0.0 {
            return Err(Error::InvalidConfig("prox_mu must be non-negative".into()));
        }
        if self.server_lr <= 0.0 {
            return Err(Error::InvalidConfig("server_lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 20,
            local_steps: 50,
            batch_size: 4,
            lr_start: 1e-2,
            lr_end: 1e-7,
            loss_mode: LossMode::MarginalPlusCondist,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::InvalidConfig("need lr_start > lr_end > 0".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.rounds * self.local_steps
    }
}

/// Cosine-annealed learning rate over the global step budget:
/// `lr_end + 0.5 * (lr_start - lr_end) * (1 + cos(pi * step / (total - 1)))`.
/// Endpoints are emitted exactly; the sequence is monotone non-increasing.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange { index: step, total: total_steps });
    }
    if step == 0 {
        return Ok(lr_start);
    }
    if step == total_steps - 1 {
        return Ok(lr_end);
    }
    let t = step as f64 / (total_steps - 1) as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (core::f64::consts::PI * t).cos()))
}

/// Mean local losses of one client round.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalMetrics {
    pub sup_loss: f64,
    pub condist_loss: f64,
    pub prox_loss: f64,
    pub total_loss: f64,
    /// Distillation weight the client applied this round.
    pub condist_weight: f64,
    /// Learning rate of the last local step.
    pub final_lr: f64,
}

/// Post-training parameters plus the sample count the server weights by.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub client_name: String,
    pub parameters: Checkpoint,
    pub sample_count: usize,
    pub metrics: LocalMetrics,
}

/// Everything a client needs for one round of local training.
pub struct ClientSetup<'a> {
    pub id: usize,
    pub name: &'a str,
    pub topology: &'a ClassTopology,
    pub train: &'a Dataset,
    pub model: &'a SegNetConfig,
    pub train_cfg: &'a TrainConfig,
    pub distill: &'a DistillConfig<f32>,
    pub aggregator: &'a AggregatorConfig,
    /// Seed for batch order; the round index selects the stream.
    pub seed: u64,
}

/// Run `local_steps` of plain SGD from the received global model.
///
/// The student initializes from `global`; in distillation mode a frozen copy
/// of `global` acts as the teacher for the whole round. The learning rate
/// follows the cosine schedule over the global step index `round * S + s`.
/// FedProx adds `(mu/2) * ||theta - theta_global||^2` to every step's loss.
pub fn local_train(setup: &ClientSetup<'_>, global: &Checkpoint, round: usize) -> Result<ClientUpdate> {
    let cfg = setup.train_cfg;
    cfg.validate()?;
    let mut student = SegNet::<f32>::from_checkpoint(setup.model.clone(), global)?;
    let teacher = match cfg.loss_mode {
        LossMode::MarginalPlusCondist => Some(SegNet::<f32>::from_checkpoint(setup.model.clone(), global)?),
        _ => None,
    };
    let prox_mu = match setup.aggregator.kind {
        AggregatorKind::FedProx => setup.aggregator.prox_mu,
        _ => 0.0,
    };
    let global_ref: Vec<Tensor<f32>> = if prox_mu > 0.0 {
        global
            .entries
            .iter()
            .map(|e| Tensor::constant(e.data.clone(), &e.shape))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let weight = schedule_weight(round, setup.distill)?;

    let mut batches = BatchIter::new(
        setup.train.len(),
        cfg.batch_size,
        derive_seed(setup.seed, round as u64),
    );
    let mut metrics = LocalMetrics { condist_weight: weight, ..LocalMetrics::default() };

    for s in 0..cfg.local_steps {
        let global_step = round * cfg.local_steps + s;
        let lr = cosine_lr(global_step, cfg.total_steps(), cfg.lr_start, cfg.lr_end)?;
        let idx = batches.next().expect("batch iterator is infinite");
        let (image, label) = setup.train.batch::<f32>(&idx)?;

        let tape = Tape::new();
        let pass = student.forward_train(&tape, &image)?;
        let sup = supervised_loss(setup, &pass.heads, &label)?;
        let sup_val = sup.scalar()?;
        check_finite(sup_val, setup.name, s, "supervised")?;

        let mut total = sup.clone();
        let mut cd_val = 0.0f32;
        if let Some(teacher) = &teacher {
            let teacher_logits = teacher.forward_infer(&image)?.swap_remove(0).detach();
            let cd = condist_loss(&pass.heads[0], &teacher_logits, &label, setup.topology, setup.distill)?;
            cd_val = cd.scalar()?;
            check_finite(cd_val, setup.name, s, "condist")?;
            total = total_loss(&sup, &cd, weight as f32)?;
        }
        let mut prox_val = 0.0f32;
        if prox_mu > 0.0 {
            let prox = prox_penalty(&pass.leaves, &global_ref, prox_mu as f32)?;
            prox_val = prox.scalar()?;
            check_finite(prox_val, setup.name, s, "proximal")?;
            total = total.add(&prox)?;
        }
        let total_val = total.scalar()?;
        check_finite(total_val, setup.name, s, "total")?;

        total.backward()?;
        student.apply_sgd(&pass.leaves, lr as f32)?;

        metrics.sup_loss += sup_val as f64;
        metrics.condist_loss += cd_val as f64;
        metrics.prox_loss += prox_val as f64;
        metrics.total_loss += total_val as f64;
        metrics.final_lr = lr;
    }
    if cfg.local_steps > 0 {
        let n = cfg.local_steps as f64;
        metrics.sup_loss /= n;
        metrics.condist_loss /= n;
        metrics.prox_loss /= n;
        metrics.total_loss /= n;
    }

    Ok(ClientUpdate {
        client_id: setup.id,
        client_name: setup.name.into(),
        parameters: student.to_checkpoint(round as u32 + 1, ((round + 1) * cfg.local_steps) as u64),
        sample_count: setup.train.len(),
        metrics,
    })
}

/// Deep-supervised loss: per head, the mode's DiceCE on nearest-downsampled
/// labels, weighted by the exponential-decay head weights. Distillation
/// applies to the full-resolution head only (handled by the caller).
fn supervised_loss(
    setup: &ClientSetup<'_>,
    heads: &[Tensor<f32>],
    label: &LabelField,
) -> Result<Tensor<f32>> {
    let weights = deep_supervision_weights(heads.len());
    let eps = setup.distill.dice_epsilon;
    let mut total: Option<Tensor<f32>> = None;
    for (d, head) in heads.iter().enumerate() {
        let lab_d = label.downsample(1 << d);
        let probs = softmax_probs(head, 1.0)?;
        let term = match setup.train_cfg.loss_mode {
            LossMode::DiceCeStandard => {
                let onehot = onehot_full(&lab_d, setup.topology.num_classes())?;
                dice_ce_loss(&probs, &onehot, eps)?
            }
            LossMode::Marginal | LossMode::MarginalPlusCondist => {
                let merged = marginal_merge(&probs, setup.topology)?;
                let onehot = onehot_merged(&lab_d, setup.topology)?;
                dice_ce_loss(&merged, &onehot, eps)?
            }
        };
        let weighted = term.mul_scalar(real(weights[d]));
        total = Some(match total {
            Some(t) => t.add(&weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("at least one head"))
}

/// `(mu/2) * sum_params ||theta - theta_global||^2`
fn prox_penalty(
    leaves: &[Tensor<f32>],
    global_ref: &[Tensor<f32>],
    mu: f32,
) -> Result<Tensor<f32>> {
    let mut acc: Option<Tensor<f32>> = None;
    for (leaf, reference) in leaves.iter().zip(global_ref) {
        let sq = leaf.sub(reference)?.square().sum_all();
        acc = Some(match acc {
            Some(a) => a.add(&sq)?,
            None => sq,
        });
    }
    Ok(acc.expect("at least one parameter").mul_scalar(mu * 0.5))
}

fn check_finite(v: f32, client: &str, step: usize, term: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { client: client.into(), step, term })
    }
}

/// Per-round batch seed from a client seed, splitmix64-style so consecutive
/// rounds do not reuse permutation streams.
fn derive_seed(base: u64, round: u64) -> u64 {
    let mut z = base ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Server aggregation
// ---------------------------------------------------------------------------

/// Sample-count-weighted parameter mean: `theta = sum_k (n_k / sum_n) theta_k`.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<Checkpoint> {
    if updates.is_empty() {
        return Err(Error::AggregationMismatch("no updates to aggregate".into()));
    }
    let first = &updates[0].parameters;
    for u in &updates[1..] {
        first.check_congruent(&u.parameters)?;
    }
    let total_n: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    if total_n <= 0.0 {
        return Err(Error::AggregationMismatch("total sample count is zero".into()));
    }
    let mut out = first.clone();
    for (ei, entry) in out.entries.iter_mut().enumerate() {
        let mut acc = alloc::vec![0.0f64; entry.data.len()];
        for u in updates {
            let w = u.sample_count as f64 / total_n;
            for (a, &v) in acc.iter_mut().zip(&u.parameters.entries[ei].data) {
                *a += w * v as f64;
            }
        }
        for (slot, a) in entry.data.iter_mut().zip(&acc) {
            *slot = *a as f32;
        }
    }
    Ok(out)
}

/// Server-side momentum state for FedOpt, persisted across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct FedOptState {
    velocity: Vec<Vec<f32>>,
}

impl FedOptState {
    /// Zero velocity congruent with the global model.
    pub fn new(global: &Checkpoint) -> Self {
        FedOptState {
            velocity: global.entries.iter().map(|e| alloc::vec![0.0f32; e.data.len()]).collect(),
        }
    }
}

/// FedOpt server step on the aggregated client delta:
/// `delta = sum_k (n_k/sum_n) (theta_k - theta_global)`,
/// `v <- m * v + delta`, `theta <- theta + server_lr * v`.
pub fn aggregate_fedopt(
    global: &Checkpoint,
    updates: &[ClientUpdate],
    cfg: &AggregatorConfig,
    state: &mut FedOptState,
) -> Result<Checkpoint> {
    if updates.is_empty() {
        return Err(Error::AggregationMismatch("no updates to aggregate".into()));
    }
    for u in updates {
        global.check_congruent(&u.parameters)?;
    }
    if state.velocity.len() != global.entries.len()
        || state
            .velocity
            .iter()
            .zip(&global.entries)
            .any(|(v, e)| v.len() != e.data.len())
    {
        return Err(Error::AggregationMismatch(format!(
            "velocity buffer not congruent with global model ({} entries)",
            state.velocity.len()
        )));
    }
    let total_n: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    let m = cfg.server_momentum;
    let lr = cfg.server_lr;
    let mut out = global.clone();
    for (ei, entry) in out.entries.iter_mut().enumerate() {
        let vel = &mut state.velocity[ei];
        for i in 0..entry.data.len() {
            let g = global.entries[ei].data[i] as f64;
            let mut delta = 0.0f64;
            for u in updates {
                let w = u.sample_count as f64 / total_n;
                delta += w * (u.parameters.entries[ei].data[i] as f64 - g);
            }
            let v = m * vel[i] as f64 + delta;
            vel[i] = v as f32;
            entry.data[i] = (g + lr * v) as f32;
        }
    }
    Ok(out)
}
