//! Per-class Dice evaluation, union-merged scoring, and report assembly.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::SegNet;
use crate::tensor::Real;
use crate::topology::toy;

/// Mapping from each tumor class to its parent organ class, used to score
/// lesions merged into their organs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnionMap {
    pairs: Vec<(u8, u8)>,
}

impl UnionMap {
    pub fn new(pairs: Vec<(u8, u8)>) -> Result<Self> {
        for &(tumor, organ) in &pairs {
            if tumor == organ || organ == 0 {
                return Err(Error::BadTopology(alloc::format!(
                    "union pair {tumor}->{organ} is not a tumor-to-organ mapping"
                )));
            }
            if pairs.iter().any(|&(t, _)| t == organ) {
                return Err(Error::BadTopology(alloc::format!(
                    "union map is not acyclic: {organ} is both parent and tumor"
                )));
            }
        }
        Ok(UnionMap { pairs })
    }

    /// The toy map: each tumor folds into its host organ.
    pub fn toy() -> Self {
        UnionMap::new(toy::tumor_parents()).expect("toy union map is valid")
    }

    pub fn apply(&self, class: u8) -> u8 {
        self.pairs
            .iter()
            .find(|&&(t, _)| t == class)
            .map(|&(_, o)| o)
            .unwrap_or(class)
    }
}

/// Replace every tumor index by its parent organ index. Idempotent.
pub fn union_merge(labels: &[u8], map: &UnionMap) -> Vec<u8> {
    labels.iter().map(|&c| map.apply(c)).collect()
}

/// Overlap score `2|pred=c and gt=c| / (|pred=c| + |gt=c|)` for one class on
/// one sample. Defined as 1.0 when both masks are empty and 0.0 when exactly
/// one is, so absent structures are scored fairly across methods.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let mut p = 0usize;
    let mut g = 0usize;
    let mut both = 0usize;
    for (&pv, &gv) in pred.iter().zip(gt) {
        let pm = pv == class;
        let gm = gv == class;
        p += pm as usize;
        g += gm as usize;
        both += (pm && gm) as usize;
    }
    match (p, g) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (p + g) as f64,
    }
}

/// Per-class Dice over a dataset plus the foreground average.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub run_id: String,
    pub dataset_id: String,
    /// Federated round the evaluated checkpoint came from, when known.
    pub round: Option<u32>,
    pub sample_count: usize,
    /// (class, mean per-sample Dice), ascending by class.
    pub per_class: Vec<(u8, f64)>,
    /// Arithmetic mean of the listed per-class scores.
    pub average: f64,
}

impl DiceReport {
    pub fn class_score(&self, class: u8) -> Option<f64> {
        self.per_class.iter().find(|&&(c, _)| c == class).map(|&(_, s)| s)
    }
}

/// Argmax inference on the full-resolution head, scored per class against the
/// dataset labels. `classes = None` scores every foreground class present in
/// the ground truth (after union merging when a map is given).
pub fn evaluate<F: Real>(
    net: &SegNet<F>,
    dataset: &Dataset,
    union: Option<&UnionMap>,
    classes: Option<&[u8]>,
    run_id: &str,
    dataset_id: &str,
    round: Option<u32>,
    eval_batch: usize,
) -> Result<DiceReport> {
    let n = dataset.len();
    let mut preds: Vec<Vec<u8>> = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + eval_batch.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (image, _) = dataset.batch::<F>(&idx)?;
        let heads = net.forward_infer(&image)?;
        let am = heads[0].argmax_axis(1)?;
        let hw = dataset.height * dataset.width;
        for bi in 0..idx.len() {
            preds.push(am.data()[bi * hw..(bi + 1) * hw].iter().map(|&v| v as u8).collect());
        }
        start = end;
    }

    let merge = |l: &[u8]| -> Vec<u8> {
        match union {
            Some(map) => union_merge(l, map),
            None => l.to_vec(),
        }
    };
    let gts: Vec<Vec<u8>> = dataset.samples.iter().map(|s| merge(&s.label)).collect();
    let preds: Vec<Vec<u8>> = preds.iter().map(|p| merge(p)).collect();

    let class_list: Vec<u8> = match classes {
        Some(cs) => {
            let mut cs = cs.to_vec();
            cs.sort_unstable();
            cs.dedup();
            cs.retain(|&c| c != 0);
            cs
        }
        None => {
            let mut present = [false; 256];
            for gt in &gts {
                for &c in gt {
                    present[c as usize] = true;
                }
            }
            (1..=255u8).filter(|&c| present[c as usize]).collect()
        }
    };
    if class_list.is_empty() {
        return Err(Error::InvalidConfig("no foreground classes to evaluate".into()));
    }

    let mut per_class = Vec::with_capacity(class_list.len());
    for &c in &class_list {
        let mut total = 0.0f64;
        for (p, g) in preds.iter().zip(&gts) {
            total += dice_score(p, g, c);
        }
        per_class.push((c, total / n.max(1) as f64));
    }
    let average = per_class.iter().map(|&(_, s)| s).sum::<f64>() / per_class.len() as f64;

    Ok(DiceReport {
        run_id: run_id.into(),
        dataset_id: dataset_id.into(),
        round,
        sample_count: n,
        per_class,
        average,
    })
}
