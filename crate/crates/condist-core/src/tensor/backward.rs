//! Reverse-mode gradient rules, one arm per recorded op.


use super::conv;
use super::{real, Node, Op, Real, TensorInner};

/// Accumulate this node's contribution into its inputs' gradients.
///
/// A node whose output gradient was never populated lies off the path from
/// the loss and is skipped. Inputs that do not require gradients (constants,
/// detached tensors) are skipped as well.
pub(crate) fn backprop<F: Real>(node: &Node<F>) {
    let guard = node.output.grad.borrow();
    let Some(gout) = guard.as_ref() else { return };
    let inputs = &node.inputs;

    match &node.op {
        Op::Add => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.requires_grad {
                acc_maybe_scalar(a, gout.iter().copied());
            }
            if b.requires_grad {
                acc_maybe_scalar(b, gout.iter().copied());
            }
        }
        Op::Sub => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.requires_grad {
                acc_maybe_scalar(a, gout.iter().copied());
            }
            if b.requires_grad {
                acc_maybe_scalar(b, gout.iter().map(|&g| -g));
            }
        }
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.requires_grad {
                acc_maybe_scalar(a, pair_values(gout, &b.data).map(|(g, o)| g * o));
            }
            if b.requires_grad {
                acc_maybe_scalar(b, pair_values(gout, &a.data).map(|(g, o)| g * o));
            }
        }
        Op::Div => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.requires_grad {
                acc_maybe_scalar(a, pair_values(gout, &b.data).map(|(g, d)| g / d));
            }
            if b.requires_grad {
                // d(a/b)/db = -a/b^2 = -out/b
                let out = &node.output.data;
                let contrib = gout.iter().zip(out).zip(broadcast(&b.data, gout.len()));
                acc_maybe_scalar(b, contrib.map(|((&g, &o), d)| -(g * o / d)));
            }
        }
        Op::AddScalar => {
            acc_if_needed(&inputs[0], gout.iter().copied());
        }
        Op::MulScalar(s) => {
            let s = *s;
            acc_if_needed(&inputs[0], gout.iter().map(move |&g| g * s));
        }
        Op::Neg => {
            acc_if_needed(&inputs[0], gout.iter().map(|&g| -g));
        }
        Op::Exp => {
            let out = &node.output.data;
            acc_if_needed(&inputs[0], gout.iter().zip(out).map(|(&g, &o)| g * o));
        }
        Op::Log => {
            let x = &inputs[0].data;
            acc_if_needed(&inputs[0], gout.iter().zip(x).map(|(&g, &xv)| g / xv));
        }
        Op::Square => {
            let x = &inputs[0].data;
            let two = real::<F>(2.0);
            acc_if_needed(&inputs[0], gout.iter().zip(x).map(move |(&g, &xv)| g * two * xv));
        }
        Op::Relu => {
            let x = &inputs[0].data;
            let z = F::zero();
            acc_if_needed(
                &inputs[0],
                gout.iter().zip(x).map(move |(&g, &xv)| if xv > z { g } else { z }),
            );
        }
        Op::ClampMin(c) => {
            let x = &inputs[0].data;
            let (c, z) = (*c, F::zero());
            acc_if_needed(
                &inputs[0],
                gout.iter().zip(x).map(move |(&g, &xv)| if xv > c { g } else { z }),
            );
        }
        Op::SumAll => {
            let g0 = gout[0];
            acc_if_needed(&inputs[0], core::iter::repeat(g0).take(inputs[0].data.len()));
        }
        Op::MeanAll => {
            let g0 = gout[0] / real::<F>(inputs[0].data.len() as f64);
            acc_if_needed(&inputs[0], core::iter::repeat(g0).take(inputs[0].data.len()));
        }
        Op::SumAxis(axis) | Op::MeanAxis(axis) => {
            let x = &inputs[0];
            if !x.requires_grad {
                return;
            }
            let shape = &x.shape;
            let mid = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let scale = match node.op {
                Op::MeanAxis(_) => F::one() / real::<F>(mid as f64),
                _ => F::one(),
            };
            let mut gx = x.grad_buffer();
            for o in 0..outer {
                for m in 0..mid {
                    let row = &mut gx[(o * mid + m) * inner..][..inner];
                    let grow = &gout[o * inner..][..inner];
                    for (slot, &g) in row.iter_mut().zip(grow) {
                        *slot += g * scale;
                    }
                }
            }
        }
        Op::SoftmaxCh { tau } => {
            let x = &inputs[0];
            if !x.requires_grad {
                return;
            }
            let p = &node.output.data;
            let shape = &x.shape;
            let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let inv_tau = F::one() / *tau;
            let mut gx = x.grad_buffer();
            for bi in 0..b {
                let base = bi * c * hw;
                for v in 0..hw {
                    let mut dot = 0.0f64;
                    for ci in 0..c {
                        let idx = base + ci * hw + v;
                        dot += (gout[idx] * p[idx]).to_f64().unwrap_or(f64::NAN);
                    }
                    let dot = real::<F>(dot);
                    for ci in 0..c {
                        let idx = base + ci * hw + v;
                        gx[idx] += p[idx] * (gout[idx] - dot) * inv_tau;
                    }
                }
            }
        }
        Op::ChannelGather { groups } => {
            let x = &inputs[0];
            if !x.requires_grad {
                return;
            }
            let shape = &x.shape;
            let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let gc = groups.len();
            let mut gx = x.grad_buffer();
            for bi in 0..b {
                for (gi, g) in groups.iter().enumerate() {
                    let grow = &gout[(bi * gc + gi) * hw..][..hw];
                    for &j in g {
                        let row = &mut gx[(bi * c + j) * hw..][..hw];
                        for (slot, &gv) in row.iter_mut().zip(grow) {
                            *slot += gv;
                        }
                    }
                }
            }
        }
        Op::CondBackground { floor } => {
            // c_i = g_i / D with D = max(sum_j g_j, floor); when the floor is
            // inactive, dc_i/dg_j = (delta_ij - c_i) / D.
            let grouped = &inputs[0];
            if !grouped.requires_grad {
                return;
            }
            let out = &node.output.data;
            let shape = &node.output.shape;
            let (b, gc, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut gg = grouped.grad_buffer();
            for bi in 0..b {
                for v in 0..hw {
                    let mut rem = 0.0f64;
                    let mut dot = 0.0f64;
                    for gi in 0..gc {
                        let idx = (bi * gc + gi) * hw + v;
                        rem += grouped.data[idx].to_f64().unwrap_or(f64::NAN);
                        dot += (gout[idx] * out[idx]).to_f64().unwrap_or(f64::NAN);
                    }
                    let rem = real::<F>(rem);
                    let active = rem > *floor;
                    let denom = if active { rem } else { *floor };
                    let dot = real::<F>(dot);
                    for gi in 0..gc {
                        let idx = (bi * gc + gi) * hw + v;
                        let num = if active { gout[idx] - dot } else { gout[idx] };
                        gg[idx] += num / denom;
                    }
                }
            }
        }
        Op::MaskMul => {
            let (x, m) = (&inputs[0], &inputs[1]);
            if !x.requires_grad {
                return;
            }
            let shape = &x.shape;
            let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut gx = x.grad_buffer();
            for bi in 0..b {
                let mrow = &m.data[bi * hw..][..hw];
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    let row = &mut gx[off..off + hw];
                    let grow = &gout[off..off + hw];
                    for ((slot, &g), &mv) in row.iter_mut().zip(grow).zip(mrow) {
                        *slot += g * mv;
                    }
                }
            }
        }
        Op::Conv2d { stride, pad_h, pad_w } => {
            let bias = inputs.get(2);
            conv::conv2d_backward(&inputs[0], &inputs[1], bias, gout, *stride, *pad_h, *pad_w);
        }
        Op::Upsample2x => {
            let x = &inputs[0];
            if !x.requires_grad {
                return;
            }
            let shape = &x.shape;
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let (oh, ow) = (2 * h, 2 * w);
            let mut gx = x.grad_buffer();
            for plane in 0..b * c {
                let gplane = &gout[plane * oh * ow..][..oh * ow];
                let xplane = &mut gx[plane * h * w..][..h * w];
                for hh in 0..h {
                    for ww in 0..w {
                        let top = 2 * hh * ow + 2 * ww;
                        let bot = (2 * hh + 1) * ow + 2 * ww;
                        xplane[hh * w + ww] +=
                            gplane[top] + gplane[top + 1] + gplane[bot] + gplane[bot + 1];
                    }
                }
            }
        }
        Op::Slice1d { start } => {
            let x = &inputs[0];
            if !x.requires_grad {
                return;
            }
            let mut gx = x.grad_buffer();
            for (slot, &g) in gx[*start..*start + gout.len()].iter_mut().zip(gout) {
                *slot += g;
            }
        }
        Op::Reshape => {
            acc_if_needed(&inputs[0], gout.iter().copied());
        }
    }
}

fn acc_if_needed<F: Real>(input: &TensorInner<F>, contrib: impl Iterator<Item = F>) {
    if input.requires_grad {
        input.accumulate_grad(contrib);
    }
}

/// Accumulate into an input that may be a broadcast scalar: single-element
/// inputs collect the f64 sum of all contributions.
fn acc_maybe_scalar<F: Real>(input: &TensorInner<F>, contrib: impl Iterator<Item = F>) {
    if input.data.len() == 1 {
        let total: f64 = contrib.map(|c| c.to_f64().unwrap_or(f64::NAN)).sum();
        input.accumulate_grad(core::iter::once(real::<F>(total)));
    } else {
        input.accumulate_grad(contrib);
    }
}

/// Pair each output-gradient element with the matching value of `other`,
/// honoring scalar broadcasting.
fn pair_values<'a, F: Real>(gout: &'a [F], other: &'a [F]) -> impl Iterator<Item = (F, F)> + 'a {
    gout.iter().copied().zip(broadcast(other, gout.len()))
}

/// Iterate `vals`, repeating a single element out to `len` when broadcast.
fn broadcast<F: Real>(vals: &[F], len: usize) -> impl Iterator<Item = F> + '_ {
    let scalar = vals.len() == 1;
    (0..len).map(move |i| if scalar { vals[0] } else { vals[i] })
}
