//! Relative Lp data misfit over distributed tensors.

use crate::error::{Error, Result};
use crate::runtime::{allreduce_sum, WorkerContext};
use crate::tensor::DistTensor;

fn check_layout(y: &DistTensor<f64>, target: &DistTensor<f64>) -> Result<()> {
    if y.global_shape() != target.global_shape() {
        return Err(Error::invalid(format!(
            "loss: prediction shape {:?} vs target shape {:?}",
            y.global_shape(),
            target.global_shape()
        )));
    }
    if y.partition().id() != target.partition().id() || y.local_box() != target.local_box() {
        return Err(Error::invalid("loss: prediction and target must share a partition"));
    }
    Ok(())
}

/// `|y - target|_p / |target|_p` with global norms accumulated in fixed rank
/// order; every worker receives the identical scalar.
pub fn relative_lp_loss(
    ctx: &mut WorkerContext,
    y: &DistTensor<f64>,
    target: &DistTensor<f64>,
    p: f64,
) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::invalid("loss order p must be >= 1"));
    }
    check_layout(y, target)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in y.local().iter().zip(target.local()) {
        num += (a - b).abs().powf(p);
        den += b.abs().powf(p);
    }
    let sums = allreduce_sum(ctx, y.partition().id(), &[num, den])?;
    if sums[1] == 0.0 {
        return Err(Error::Degenerate("relative loss with zero target norm".into()));
    }
    Ok((sums[0] / sums[1]).powf(1.0 / p))
}

/// Relative L2 loss together with its gradient `d loss / d y`.
pub fn relative_l2_loss_grad(
    ctx: &mut WorkerContext,
    y: &DistTensor<f64>,
    target: &DistTensor<f64>,
) -> Result<(f64, DistTensor<f64>)> {
    check_layout(y, target)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in y.local().iter().zip(target.local()) {
        let d = a - b;
        num += d * d;
        den += b * b;
    }
    let sums = allreduce_sum(ctx, y.partition().id(), &[num, den])?;
    if sums[1] == 0.0 {
        return Err(Error::Degenerate("relative loss with zero target norm".into()));
    }
    let nr = sums[0].sqrt();
    let nt = sums[1].sqrt();
    let loss = nr / nt;
    let mut grad = y.clone();
    if nr == 0.0 {
        for g in grad.local_mut() {
            *g = 0.0;
        }
    } else {
        let scale = 1.0 / (nr * nt);
        for (g, (&a, &b)) in grad.local_mut().iter_mut().zip(y.local().iter().zip(target.local())) {
            *g = (a - b) * scale;
        }
    }
    Ok((loss, grad))
}
