//! Central finite-difference verification of autodiff gradients.

use alloc::vec;
use alloc::vec::Vec;

use super::{real, Real, Tape, Tensor};
use crate::error::{Error, Result};

/// Per-coordinate comparison of the autodiff gradient against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error. Coordinates where both values
    /// are below 1e-8 in magnitude are compared absolutely and contribute no
    /// relative error.
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub autodiff: Vec<f64>,
    pub finite_diff: Vec<f64>,
    pub pass: bool,
}

/// Check the gradient of a scalar-valued tensor function at `point`.
///
/// The autodiff pass binds `point` as a tape leaf and runs `backward()`; the
/// finite-difference pass re-evaluates `f` on perturbed constants, dividing
/// by the realized step so float quantization of `x ± h` cancels. The two
/// paths share nothing beyond the forward implementation under test.
pub fn grad_check<F: Real>(
    f: impl Fn(&Tensor<F>) -> Result<Tensor<F>>,
    point: &Tensor<F>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::BadStep { h });
    }

    // Autodiff gradient.
    let tape = Tape::new();
    let leaf = tape.var(point.data().to_vec(), point.shape())?;
    let out = f(&leaf)?;
    if out.len() != 1 {
        return Err(Error::GradCheckNonScalar { shape: out.shape().to_vec() });
    }
    let autodiff: Vec<f64> = if out.requires_grad() {
        out.backward()?;
        match leaf.grad() {
            Some(g) => g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
            None => vec![0.0; leaf.len()],
        }
    } else {
        // f ignored the gradient path entirely (e.g. all inputs detached).
        vec![0.0; leaf.len()]
    };

    // Central finite differences on gradient-free evaluations.
    let base = point.data().to_vec();
    let n = base.len();
    let step = real::<F>(h);
    let mut finite_diff = vec![0.0f64; n];
    for i in 0..n {
        let mut plus = base.clone();
        plus[i] = plus[i] + step;
        let mut minus = base.clone();
        minus[i] = minus[i] - step;
        let realized = plus[i].to_f64().unwrap_or(f64::NAN) - minus[i].to_f64().unwrap_or(f64::NAN);
        let fp = eval_scalar(&f, plus, point.shape())?;
        let fm = eval_scalar(&f, minus, point.shape())?;
        finite_diff[i] = (fp - fm) / realized;
    }

    let mut max_rel_err = 0.0f64;
    let mut worst = 0usize;
    for i in 0..n {
        let (a, b) = (autodiff[i], finite_diff[i]);
        if a.abs() < 1e-8 && b.abs() < 1e-8 {
            continue;
        }
        let rel = (a - b).abs() / a.abs().max(b.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = i;
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst_coordinate: worst,
        autodiff,
        finite_diff,
        pass: max_rel_err < tol,
    })
}

fn eval_scalar<F: Real>(
    f: &impl Fn(&Tensor<F>) -> Result<Tensor<F>>,
    data: Vec<F>,
    shape: &[usize],
) -> Result<f64> {
    let t = Tensor::constant(data, shape)?;
    let out = f(&t)?;
    if out.len() != 1 {
        return Err(Error::GradCheckNonScalar { shape: out.shape().to_vec() });
    }
    Ok(out.data()[0].to_f64().unwrap_or(f64::NAN))
}
