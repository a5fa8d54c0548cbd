//! Broadcast and repartition as linear operators with explicit adjoints.
//!
//! Broadcast copies subtensors from a smaller partition to every matched
//! worker of a larger one; its adjoint sum-reduces each copy group back.
//! Repartition redistributes an unchanged global tensor between partitions;
//! its adjoint is the reverse repartition. [`adjoint_check`] measures the
//! relative discrepancy of `<Ax, y> - <x, A'y>` on seeded random data.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::partition::{broadcast_compatible, transfer_plan, Partition, RegionBox};
use crate::runtime::{allreduce_sum, exchange, group_broadcast, OpTag, WorkerContext};
use crate::tensor::{DistTensor, Scalar};

/// Copy each source worker's subtensor to the destination workers matched to
/// it. Requires the partitions to satisfy the broadcasting rules with
/// coinciding decompositions along matched dimensions; the output's global
/// shape is the input's, left-padded with singleton dimensions.
pub fn broadcast_fwd<T: Scalar>(
    ctx: &mut WorkerContext,
    x: &DistTensor<T>,
    dest: &Partition,
) -> Result<DistTensor<T>> {
    let source = x.partition().clone();
    let pattern = broadcast_compatible(&source, dest).ok_or_else(|| {
        Error::invalid(format!(
            "partitions {:?} -> {:?} violate the broadcasting rules",
            source.dims(),
            dest.dims()
        ))
    })?;
    let pad = pattern.pad;
    let mut out_shape = vec![1usize; pad];
    out_shape.extend_from_slice(x.global_shape());

    let pid = dest.id();
    let seq = ctx.next_seq(pid);
    let rank = ctx.rank();

    // Matched decompositions coincide, so every destination worker receives a
    // verbatim copy of its source worker's block.
    if rank < source.total_workers() {
        let payload = x.local().to_vec();
        let region = pad_box(x.local_box(), pad);
        for r in pattern.copy_group(&source, dest, rank)? {
            if r != rank {
                ctx.send_block(r, OpTag::Broadcast, pid, seq, region.clone(), T::into_payload(payload.clone()))?;
            }
        }
    }

    if rank < dest.total_workers() {
        let src_rank = pattern.source_rank(&source, dest, rank)?;
        let (region, local) = if src_rank == rank {
            (pad_box(x.local_box(), pad), x.local().to_vec())
        } else {
            let msg = ctx.recv_block(src_rank, OpTag::Broadcast, pid, seq)?;
            (msg.region, T::from_payload(msg.payload)?)
        };
        DistTensor::from_parts(dest, &out_shape, region, local)
    } else {
        DistTensor::from_parts(dest, &out_shape, RegionBox::empty(out_shape.len()), Vec::new())
    }
}

/// Adjoint of [`broadcast_fwd`]: each source worker receives the elementwise
/// sum of the gradients held by its copy group, accumulated in ascending
/// rank order. The output's global shape drops the padding dimensions again.
pub fn broadcast_adj<T: Scalar>(
    ctx: &mut WorkerContext,
    g: &DistTensor<T>,
    source: &Partition,
) -> Result<DistTensor<T>> {
    let dest = g.partition().clone();
    let pattern = broadcast_compatible(source, &dest).ok_or_else(|| {
        Error::invalid(format!(
            "partitions {:?} -> {:?} violate the broadcasting rules",
            source.dims(),
            dest.dims()
        ))
    })?;
    let pad = pattern.pad;
    if g.global_shape()[..pad].iter().any(|&n| n != 1) {
        return Err(Error::invalid("broadcast_adj: padded dimensions must have size 1"));
    }
    let out_shape: Vec<usize> = g.global_shape()[pad..].to_vec();

    let pid = dest.id();
    let seq = ctx.next_seq(pid);
    let rank = ctx.rank();

    if rank < dest.total_workers() {
        let root = pattern.source_rank(source, &dest, rank)?;
        if root != rank {
            ctx.send_block(
                root,
                OpTag::Reduce,
                pid,
                seq,
                g.local_box().clone(),
                T::into_payload(g.local().to_vec()),
            )?;
        }
    }

    if rank < source.total_workers() {
        let my_box = source.local_region(rank, &out_shape)?;
        let mut acc = vec![T::zero(); my_box.volume()];
        for r in pattern.copy_group(source, &dest, rank)? {
            let buf = if r == rank {
                g.local().to_vec()
            } else {
                let msg = ctx.recv_block(r, OpTag::Reduce, pid, seq)?;
                T::from_payload(msg.payload)?
            };
            if buf.len() != acc.len() {
                return Err(Error::protocol(format!(
                    "broadcast_adj: copy from worker {r} holds {} scalars, expected {}",
                    buf.len(),
                    acc.len()
                )));
            }
            for (a, &v) in acc.iter_mut().zip(&buf) {
                *a = *a + v;
            }
        }
        DistTensor::from_parts(source, &out_shape, my_box, acc)
    } else {
        DistTensor::from_parts(source, &out_shape, RegionBox::empty(out_shape.len()), Vec::new())
    }
}

fn pad_box(b: &RegionBox, pad: usize) -> RegionBox {
    if pad == 0 {
        return b.clone();
    }
    let mut ranges = vec![crate::partition::IndexRange { start: 0, stop: 1 }; pad];
    ranges.extend_from_slice(b.ranges());
    RegionBox::new(ranges)
}

/// Redistribute an unchanged global tensor onto another partition.
pub fn repartition<T: Scalar>(
    ctx: &mut WorkerContext,
    x: &DistTensor<T>,
    dest: &Partition,
) -> Result<DistTensor<T>> {
    if dest.id() == x.partition().id() {
        return Ok(x.clone());
    }
    let plan = transfer_plan(x.partition(), dest, x.global_shape())?;
    repartition_with_plan(ctx, x, &plan)
}

/// Redistribute using a precomputed plan.
pub fn repartition_with_plan<T: Scalar>(
    ctx: &mut WorkerContext,
    x: &DistTensor<T>,
    plan: &crate::partition::TransferPlan,
) -> Result<DistTensor<T>> {
    if plan.source().id() != x.partition().id() || plan.global_shape() != x.global_shape() {
        return Err(Error::invalid("repartition plan does not match the input tensor"));
    }
    if !x.is_partition_consistent(ctx.rank())? {
        return Err(Error::invalid("repartition input must be partition-consistent"));
    }
    let out = exchange(ctx, plan, x.local())?;
    DistTensor::from_local(plan.dest(), x.global_shape(), ctx.rank(), out)
}

/// Adjoint of [`repartition`]: a repartition in the reverse direction.
pub fn repartition_adj<T: Scalar>(
    ctx: &mut WorkerContext,
    g: &DistTensor<T>,
    source: &Partition,
) -> Result<DistTensor<T>> {
    repartition(ctx, g, source)
}

/// Collect the full global tensor on every worker (repartition onto a
/// single-worker grid, then broadcast the assembled buffer).
pub fn gather_full<T: Scalar>(ctx: &mut WorkerContext, x: &DistTensor<T>) -> Result<Vec<T>> {
    let singleton = Partition::new(&vec![1; x.partition().ndim()])?;
    let gathered = repartition(ctx, x, &singleton)?;
    let everyone: Vec<usize> = (0..ctx.num_workers()).collect();
    let out = group_broadcast(ctx, singleton.id(), 0, &everyone, gathered.local())?;
    out.ok_or_else(|| Error::protocol("gather_full: missing broadcast result"))
}

/// Distributed inner product `<a, b>` (conjugate-linear in `a`), identical on
/// every worker. Both tensors must share layout; copies held by replicated
/// tensors each contribute a term.
pub fn inner_product<T: Scalar>(
    ctx: &mut WorkerContext,
    a: &DistTensor<T>,
    b: &DistTensor<T>,
) -> Result<Complex64> {
    if a.global_shape() != b.global_shape() || a.local_box() != b.local_box() {
        return Err(Error::invalid("inner_product: layout mismatch"));
    }
    let mut local = Complex64::new(0.0, 0.0);
    for (&x, &y) in a.local().iter().zip(b.local()) {
        local += T::inner_term(x, y);
    }
    let total = allreduce_sum(ctx, a.partition().id(), &[local])?;
    Ok(total[0])
}

/// Distributed L2 norm, identical on every worker.
pub fn norm_l2<T: Scalar>(ctx: &mut WorkerContext, a: &DistTensor<T>) -> Result<f64> {
    let local: f64 = a.local().iter().map(|&x| x.abs_sq()).sum();
    let total = allreduce_sum(ctx, a.partition().id(), &[local])?;
    Ok(total[0].sqrt())
}

/// A linear operator between distributed tensor spaces, with its adjoint.
pub struct LinearOp<'a, T: Scalar> {
    pub name: String,
    pub input_partition: Partition,
    pub input_shape: Vec<usize>,
    #[allow(clippy::type_complexity)]
    pub forward: Box<dyn Fn(&mut WorkerContext, &DistTensor<T>) -> Result<DistTensor<T>> + Sync + 'a>,
    #[allow(clippy::type_complexity)]
    pub adjoint: Box<dyn Fn(&mut WorkerContext, &DistTensor<T>) -> Result<DistTensor<T>> + Sync + 'a>,
}

impl<'a, T: Scalar> LinearOp<'a, T> {
    pub fn broadcast(source: Partition, dest: Partition, shape: Vec<usize>) -> Self {
        let src = source.clone();
        LinearOp {
            name: format!("broadcast {:?} -> {:?}", source.dims(), dest.dims()),
            input_partition: source.clone(),
            input_shape: shape,
            forward: Box::new(move |ctx, x| broadcast_fwd(ctx, x, &dest)),
            adjoint: Box::new(move |ctx, g| broadcast_adj(ctx, g, &src)),
        }
    }

    pub fn repartition(source: Partition, dest: Partition, shape: Vec<usize>) -> Self {
        let src = source.clone();
        LinearOp {
            name: format!("repartition {:?} -> {:?}", source.dims(), dest.dims()),
            input_partition: source.clone(),
            input_shape: shape,
            forward: Box::new(move |ctx, x| repartition(ctx, x, &dest)),
            adjoint: Box::new(move |ctx, g| repartition_adj(ctx, g, &src)),
        }
    }
}

/// Relative adjoint discrepancy `|<Ax, y> - <x, A'y>| / (|Ax| |y|)` on seeded
/// random `x` and `y`. The test vectors are deterministic in `seed`; `y`
/// draws fresh values per worker so replicated copies are probed
/// independently.
pub fn adjoint_check<T: Scalar>(ctx: &mut WorkerContext, op: &LinearOp<'_, T>, seed: u64) -> Result<f64> {
    let x = DistTensor::<T>::from_fn(&op.input_partition, &op.input_shape, ctx.rank(), |idx| {
        let mut lin = 0u64;
        for (d, &i) in idx.iter().enumerate() {
            lin = lin * op.input_shape[d] as u64 + i as u64;
        }
        T::hashed_unit(seed, lin)
    })?;

    let ax = (op.forward)(ctx, &x)?;
    let mut y = ax.clone();
    let rank_salt = splitmix_seed(seed ^ 0x5EED_CAFE, ctx.rank() as u64);
    for (i, v) in y.local_mut().iter_mut().enumerate() {
        *v = T::hashed_unit(rank_salt, i as u64);
    }

    let lhs = inner_product(ctx, &ax, &y)?;
    let ay = (op.adjoint)(ctx, &y)?;
    let rhs = inner_product(ctx, &x, &ay)?;

    let denom = norm_l2(ctx, &ax)? * norm_l2(ctx, &y)?;
    let diff = (lhs - rhs).norm();
    if denom == 0.0 {
        Ok(diff)
    } else {
        Ok(diff / denom)
    }
}

fn splitmix_seed(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::launch;

    #[test]
    fn broadcast_copies_slabs_to_matched_workers() {
        // (1,1,3) -> (4,4,3): each source slab lands on the 16 destination
        // workers sharing its third coordinate.
        let shape = [2usize, 2, 6];
        let p = Partition::new(&[1, 1, 3]).unwrap();
        let q = Partition::new(&[4, 4, 3]).unwrap();
        let full: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let out = launch(q.total_workers(), |ctx| {
            let x = DistTensor::from_global(&p, &shape, ctx.rank(), &full)?;
            let y = broadcast_fwd(ctx, &x, &q)?;
            Ok((y.local().to_vec(), y.local_box().clone()))
        })
        .unwrap();
        let pat = broadcast_compatible(&p, &q).unwrap();
        for (r, (local, local_box)) in out.iter().enumerate() {
            let s = pat.source_rank(&p, &q, r).unwrap();
            let expect_box = p.local_region(s, &shape).unwrap();
            assert_eq!(local_box, &expect_box);
            let expect: Vec<f64> = crate::tensor::extract_region(&full, &RegionBox::full(&shape), &expect_box);
            assert_eq!(local, &expect);
        }
    }

    #[test]
    fn broadcast_weight_to_all_workers() {
        // a 20x20 block on a singleton grid is replicated on all 8 workers
        let p = Partition::new(&[1, 1, 1, 1]).unwrap();
        let q = Partition::new(&[1, 1, 4, 2]).unwrap();
        let shape = [1usize, 1, 20, 20];
        let full: Vec<f64> = (0..400).map(|i| (i as f64).cos()).collect();
        let out = launch(8, |ctx| {
            let x = DistTensor::from_global(&p, &shape, ctx.rank(), &full)?;
            let y = broadcast_fwd(ctx, &x, &q)?;
            Ok(y.local().to_vec())
        })
        .unwrap();
        for local in out {
            assert_eq!(local, full);
        }
    }

    #[test]
    fn broadcast_identity_on_single_worker() {
        let p = Partition::new(&[1]).unwrap();
        let q = Partition::new(&[1]).unwrap();
        let out = launch(1, |ctx| {
            let x = DistTensor::from_local(&p, &[5], 0, vec![1.0, 2.0, 3.0, 4.0, 5.0])?;
            let y = broadcast_fwd(ctx, &x, &q)?;
            Ok(y.local().to_vec())
        })
        .unwrap();
        assert_eq!(out[0], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn broadcast_incompatible_is_invalid_argument() {
        let p = Partition::new(&[2, 3]).unwrap();
        let q = Partition::new(&[4, 3]).unwrap();
        let err = launch(12, |ctx| {
            let x = DistTensor::<f64>::zeros(&p, &[4, 6], ctx.rank())?;
            broadcast_fwd(ctx, &x, &q)
        })
        .unwrap_err();
        match err {
            Error::Worker { message, .. } => assert!(message.contains("broadcasting rules")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn broadcast_adjoint_sums_copy_groups() {
        // identical gradients on a copy group of size k sum to k*g
        let p = Partition::new(&[1]).unwrap();
        let q = Partition::new(&[3]).unwrap();
        let out = launch(3, |ctx| {
            let x = DistTensor::from_local(&p, &[4], ctx.rank(), if ctx.rank() == 0 {
                vec![1.0, 2.0, 3.0, 4.0]
            } else {
                vec![]
            })?;
            let y = broadcast_fwd(ctx, &x, &q)?;
            let back = broadcast_adj(ctx, &y, &p)?;
            Ok(back.local().to_vec())
        })
        .unwrap();
        assert_eq!(out[0], vec![3.0, 6.0, 9.0, 12.0]);
        assert!(out[1].is_empty());
    }

    #[test]
    fn broadcast_adjoint_inner_product_identity() {
        let p = Partition::new(&[1]).unwrap();
        let q = Partition::new(&[3]).unwrap();
        let discrepancies = launch(3, |ctx| {
            let op = LinearOp::<f64>::broadcast(p.clone(), q.clone(), vec![5]);
            adjoint_check(ctx, &op, 17)
        })
        .unwrap();
        for d in discrepancies {
            assert!(d < 1e-12, "discrepancy {d}");
        }
    }

    #[test]
    fn repartition_preserves_global_tensor() {
        let src = Partition::new(&[3, 3, 2]).unwrap();
        let dst = Partition::new(&[1, 2, 3]).unwrap();
        let shape = [5usize, 7, 6];
        let total: usize = shape.iter().product();
        let full: Vec<f64> = (0..total).map(|i| i as f64).collect();
        let out = launch(18, |ctx| {
            let x = DistTensor::from_global(&src, &shape, ctx.rank(), &full)?;
            let y = repartition(ctx, &x, &dst)?;
            gather_full(ctx, &y)
        })
        .unwrap();
        for gathered in out {
            assert_eq!(gathered, full);
        }
    }

    #[test]
    fn repartition_round_trip_is_identity() {
        let p = Partition::new(&[2]).unwrap();
        let q = Partition::new(&[4]).unwrap();
        let out = launch(4, |ctx| {
            let x = DistTensor::<f64>::from_fn(&p, &[8], ctx.rank(), |idx| idx[0] as f64)?;
            let y = repartition(ctx, &x, &q)?;
            let back = repartition_adj(ctx, &y, &p)?;
            Ok(back.local() == x.local())
        })
        .unwrap();
        assert!(out.iter().all(|&b| b));
    }

    #[test]
    fn repartition_dim_mismatch_is_invalid() {
        let p = Partition::new(&[2]).unwrap();
        let q = Partition::new(&[2, 1]).unwrap();
        let err = launch(2, |ctx| {
            let x = DistTensor::<f64>::zeros(&p, &[8], ctx.rank())?;
            repartition(ctx, &x, &q)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Worker { .. }));
    }

    #[test]
    fn adjoint_checks_for_primitives() {
        let cases = launch(12, |ctx| {
            let mut worst: f64 = 0.0;
            let p = Partition::new(&[1, 1, 3]).unwrap();
            let q = Partition::new(&[2, 2, 3]).unwrap();
            let op = LinearOp::<f64>::broadcast(p, q, vec![3, 4, 6]);
            worst = worst.max(adjoint_check(ctx, &op, 1)?);

            let p = Partition::new(&[3, 3]).unwrap();
            let q = Partition::new(&[1, 8]).unwrap();
            let op = LinearOp::<f64>::repartition(p, q, vec![9, 10]);
            worst = worst.max(adjoint_check(ctx, &op, 2)?);

            // complex repartition exercises the conjugate-linear inner product
            let p = Partition::new(&[2, 2]).unwrap();
            let q = Partition::new(&[4, 1]).unwrap();
            let op = LinearOp::<Complex64>::repartition(p, q, vec![6, 6]);
            worst = worst.max(adjoint_check(ctx, &op, 3)?);
            Ok(worst)
        })
        .unwrap();
        for worst in cases {
            assert!(worst < 1e-12, "max discrepancy {worst}");
        }
    }

    #[test]
    fn identity_op_has_zero_discrepancy() {
        let out = launch(2, |ctx| {
            let p = Partition::new(&[2]).unwrap();
            let op = LinearOp::<f64> {
                name: "identity".into(),
                input_partition: p.clone(),
                input_shape: vec![6],
                forward: Box::new(|_, x| Ok(x.clone())),
                adjoint: Box::new(|_, g| Ok(g.clone())),
            };
            adjoint_check(ctx, &op, 5)
        })
        .unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn linearity_of_repartition() {
        let p = Partition::new(&[2]).unwrap();
        let q = Partition::new(&[3]).unwrap();
        let out = launch(3, |ctx| {
            let x = DistTensor::<f64>::from_fn(&p, &[7], ctx.rank(), |i| (i[0] as f64).sin())?;
            let y = DistTensor::<f64>::from_fn(&p, &[7], ctx.rank(), |i| (i[0] as f64 + 0.5).cos())?;
            let mut combo = x.clone();
            for (c, (&a, &b)) in combo.local_mut().iter_mut().zip(x.local().iter().zip(y.local())) {
                *c = 2.0 * a - 3.0 * b;
            }
            let lhs = repartition(ctx, &combo, &q)?;
            let rx = repartition(ctx, &x, &q)?;
            let ry = repartition(ctx, &y, &q)?;
            let mut rhs = rx.clone();
            for (c, (&a, &b)) in rhs.local_mut().iter_mut().zip(rx.local().iter().zip(ry.local())) {
                *c = 2.0 * a - 3.0 * b;
            }
            let diff = lhs
                .local()
                .iter()
                .zip(rhs.local())
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            Ok(diff)
        })
        .unwrap();
        assert!(out.iter().all(|&d| d < 1e-12));
    }
}
