//! Distributed separable FFT: a chain of wholly-local multidimensional FFTs
//! interleaved with repartitions.
//!
//! A plan splits the transform dimensions into index sets, later dimensions
//! first; each stage runs on a partition that keeps its index set entirely
//! worker-local. Worker counts are re-spread onto the transform dimensions
//! not handled by the current stage (falling back to any non-stage dimension
//! when those lack capacity), largest extent first. With orthonormal local
//! transforms the whole chain is unitary, so the adjoint is the inverse.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{local_fft, Direction};
use crate::partition::{spread_workers, transfer_plan, Partition, TransferPlan};
use crate::runtime::{exchange, WorkerContext};
use crate::tensor::DistTensor;

/// One stage of the chain: the dimensions transformed locally, the partition
/// that keeps them whole, and the repartitions into/out of that partition
/// (absent when the previous partition already qualifies).
#[derive(Debug, Clone)]
pub struct DfftStage {
    pub dims: Vec<usize>,
    pub partition: Partition,
    pub forward_plan: Option<TransferPlan>,
    pub backward_plan: Option<TransferPlan>,
}

/// Ordered stages realizing a distributed FFT over `transform_dims`.
#[derive(Debug, Clone)]
pub struct DfftPlan {
    pub input_partition: Partition,
    pub global_shape: Vec<usize>,
    pub transform_dims: Vec<usize>,
    pub stages: Vec<DfftStage>,
}

impl DfftPlan {
    /// Partition of the frequency-domain output (the final stage's).
    pub fn output_partition(&self) -> &Partition {
        self.stages
            .last()
            .map(|s| &s.partition)
            .unwrap_or(&self.input_partition)
    }
}

/// Complex tensor in the (possibly mixed) frequency domain, tagged with the
/// dimensions that have been transformed.
#[derive(Debug, Clone)]
pub struct SpectralField {
    pub tensor: DistTensor<Complex64>,
    pub transformed_dims: Vec<usize>,
}

/// Build the stage chain for transforming `transform_dims` of a tensor of
/// `global_shape` distributed over `partition`.
pub fn plan_dfft(partition: &Partition, global_shape: &[usize], transform_dims: &[usize]) -> Result<DfftPlan> {
    if transform_dims.is_empty() {
        return Err(Error::invalid("transform_dims must be nonempty"));
    }
    if partition.ndim() != global_shape.len() {
        return Err(Error::invalid("partition and global shape dimensionality mismatch"));
    }
    let mut dims = transform_dims.to_vec();
    dims.sort_unstable();
    dims.dedup();
    if dims.len() != transform_dims.len() {
        return Err(Error::invalid("transform_dims must be unique"));
    }
    if *dims.last().unwrap() >= global_shape.len() {
        return Err(Error::invalid(format!(
            "transform dimension {} out of range",
            dims.last().unwrap()
        )));
    }

    // Already wholly local: one stage, no repartitions.
    if partition.is_trivial_on(&dims) {
        return Ok(DfftPlan {
            input_partition: partition.clone(),
            global_shape: global_shape.to_vec(),
            transform_dims: dims.clone(),
            stages: vec![DfftStage {
                dims,
                partition: partition.clone(),
                forward_plan: None,
                backward_plan: None,
            }],
        });
    }

    // Two index sets, later dimensions first.
    let split = dims.len().div_ceil(2);
    let first_half = dims[..split].to_vec();
    let second_half = dims[split..].to_vec();
    let mut index_sets = Vec::new();
    if !second_half.is_empty() {
        index_sets.push(second_half);
    }
    index_sets.push(first_half);

    let total = partition.total_workers();
    let mut stages = Vec::new();
    let mut prev = partition.clone();
    for (j, set) in index_sets.into_iter().enumerate() {
        let stage_partition = if j == 0 && prev.is_trivial_on(&set) {
            prev.clone()
        } else {
            let preferred: Vec<usize> = dims.iter().copied().filter(|d| !set.contains(d)).collect();
            let grid = spread_workers(total, global_shape, &set, &preferred)?;
            if grid == prev.dims() {
                prev.clone()
            } else {
                Partition::new(&grid)?
            }
        };
        let (forward_plan, backward_plan) = if stage_partition.id() == prev.id() {
            (None, None)
        } else {
            (
                Some(transfer_plan(&prev, &stage_partition, global_shape)?),
                Some(transfer_plan(&stage_partition, &prev, global_shape)?),
            )
        };
        stages.push(DfftStage {
            dims: set,
            partition: stage_partition.clone(),
            forward_plan,
            backward_plan,
        });
        prev = stage_partition;
    }

    Ok(DfftPlan {
        input_partition: partition.clone(),
        global_shape: global_shape.to_vec(),
        transform_dims: dims,
        stages,
    })
}

fn check_input(plan: &DfftPlan, x: &DistTensor<Complex64>, expected: &Partition) -> Result<()> {
    if x.partition().id() != expected.id() {
        return Err(Error::invalid(format!(
            "tensor on partition {:?} (id {}) but plan expects {:?} (id {})",
            x.partition().dims(),
            x.partition().id(),
            expected.dims(),
            expected.id()
        )));
    }
    if x.global_shape() != plan.global_shape {
        return Err(Error::invalid(format!(
            "tensor shape {:?} but plan expects {:?}",
            x.global_shape(),
            plan.global_shape
        )));
    }
    Ok(())
}

fn run_stage_fft(
    ctx: &WorkerContext,
    partition: &Partition,
    shape: &[usize],
    data: &mut [Complex64],
    dims: &[usize],
    direction: Direction,
) -> Result<()> {
    let local_box = partition.region_or_empty(ctx.rank(), shape)?;
    for &d in dims {
        let r = local_box.range(d);
        if !local_box.is_empty() && (r.start != 0 || r.stop != shape[d]) {
            return Err(Error::invalid(format!(
                "dimension {d} is not wholly local on partition {:?}",
                partition.dims()
            )));
        }
    }
    local_fft(data, &local_box.shape(), dims, direction)
}

/// Apply the forward chain: for each stage, repartition onto the stage
/// partition and transform its index set locally.
pub fn dfft_forward(ctx: &mut WorkerContext, plan: &DfftPlan, x: &DistTensor<Complex64>) -> Result<SpectralField> {
    check_input(plan, x, &plan.input_partition)?;
    let mut data = x.local().to_vec();
    for stage in &plan.stages {
        if let Some(tp) = &stage.forward_plan {
            data = exchange(ctx, tp, &data)?;
        }
        run_stage_fft(ctx, &stage.partition, &plan.global_shape, &mut data, &stage.dims, Direction::Forward)?;
    }
    let tensor = DistTensor::from_local(plan.output_partition(), &plan.global_shape, ctx.rank(), data)?;
    Ok(SpectralField {
        tensor,
        transformed_dims: plan.transform_dims.clone(),
    })
}

/// Apply the inverse chain (stages reversed, inverse transforms, reverse
/// repartitions), returning to the plan's input partition.
pub fn dfft_inverse(ctx: &mut WorkerContext, plan: &DfftPlan, field: &SpectralField) -> Result<DistTensor<Complex64>> {
    check_input(plan, &field.tensor, plan.output_partition())?;
    let mut data = field.tensor.local().to_vec();
    for stage in plan.stages.iter().rev() {
        run_stage_fft(ctx, &stage.partition, &plan.global_shape, &mut data, &stage.dims, Direction::Inverse)?;
        if let Some(tp) = &stage.backward_plan {
            data = exchange(ctx, tp, &data)?;
        }
    }
    DistTensor::from_local(&plan.input_partition, &plan.global_shape, ctx.rank(), data)
}

/// Adjoint of the forward chain. The local transforms are orthonormal and
/// repartitions are storage permutations, so the adjoint coincides with the
/// inverse; gradients propagate through this call.
pub fn dfft_adjoint(ctx: &mut WorkerContext, plan: &DfftPlan, g: &SpectralField) -> Result<DistTensor<Complex64>> {
    dfft_inverse(ctx, plan, g)
}

/// Adjoint of the inverse chain, i.e. the forward chain again.
pub fn dfft_inverse_adjoint(ctx: &mut WorkerContext, plan: &DfftPlan, g: &DistTensor<Complex64>) -> Result<SpectralField> {
    dfft_forward(ctx, plan, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::{gather_full, inner_product, norm_l2};
    use crate::runtime::launch;
    use crate::tensor::{hashed_unit_f64, volume, Scalar};

    fn hashed_tensor(
        partition: &Partition,
        shape: &[usize],
        rank: usize,
        seed: u64,
    ) -> DistTensor<Complex64> {
        DistTensor::from_fn(partition, shape, rank, |idx| {
            let mut lin = 0u64;
            for (d, &i) in idx.iter().enumerate() {
                lin = lin * shape[d] as u64 + i as u64;
            }
            Complex64::hashed_unit(seed, lin)
        })
        .unwrap()
    }

    fn sequential_reference(shape: &[usize], dims: &[usize], seed: u64, direction: Direction) -> Vec<Complex64> {
        let n = volume(shape);
        let mut full: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(
                hashed_unit_f64(seed, 2 * i as u64),
                hashed_unit_f64(seed, 2 * i as u64 + 1),
            ))
            .collect();
        local_fft(&mut full, shape, dims, direction).unwrap();
        full
    }

    fn max_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn single_worker_plan_has_one_local_stage() {
        let p = Partition::new(&[1, 1]).unwrap();
        let plan = plan_dfft(&p, &[8, 8], &[0, 1]).unwrap();
        assert_eq!(plan.stages.len(), 1);
        assert!(plan.stages[0].forward_plan.is_none());
        assert_eq!(plan.stages[0].dims, vec![0, 1]);
    }

    #[test]
    fn trivial_on_transform_dims_needs_no_repartition() {
        let p = Partition::new(&[4, 1]).unwrap();
        let plan = plan_dfft(&p, &[8, 6], &[1]).unwrap();
        assert_eq!(plan.stages.len(), 1);
        assert!(plan.stages[0].forward_plan.is_none());
    }

    #[test]
    fn stage_layout_moves_workers_off_stage_dims() {
        // 8 workers over (batch, chan, x, y, t); transform x, y, t.
        let p = Partition::new(&[1, 1, 2, 2, 2]).unwrap();
        let shape = [1usize, 20, 32, 32, 16];
        let plan = plan_dfft(&p, &shape, &[2, 3, 4]).unwrap();
        assert_eq!(plan.stages.len(), 2);
        // stage 1 transforms time; its partition is whole on t and keeps the
        // workers on the spatial dims (never batch or channel)
        assert_eq!(plan.stages[0].dims, vec![4]);
        let s1 = plan.stages[0].partition.dims();
        assert_eq!(s1[4], 1);
        assert_eq!(s1[0], 1);
        assert_eq!(s1[1], 1);
        assert_eq!(s1[2] * s1[3], 8);
        // stage 2 transforms x,y on a time-partitioned layout
        assert_eq!(plan.stages[1].dims, vec![2, 3]);
        let s2 = plan.stages[1].partition.dims();
        assert_eq!(s2, &[1, 1, 1, 1, 8]);
        // every stage keeps its own dims wholly local (structural legality)
        for stage in &plan.stages {
            assert!(stage.partition.is_trivial_on(&stage.dims));
            assert_eq!(stage.partition.total_workers(), 8);
        }
    }

    #[test]
    fn forward_matches_gathered_sequential_fft() {
        let shape = [8usize, 8];
        let p = Partition::new(&[2, 1]).unwrap();
        let want = sequential_reference(&shape, &[0, 1], 5, Direction::Forward);
        let plan = plan_dfft(&p, &shape, &[0, 1]).unwrap();
        let out = launch(2, |ctx| {
            let x = hashed_tensor(&p, &shape, ctx.rank(), 5);
            let f = dfft_forward(ctx, &plan, &x)?;
            gather_full(ctx, &f.tensor)
        })
        .unwrap();
        for got in out {
            assert!(max_err(&got, &want) < 1e-12);
        }
    }

    #[test]
    fn forward_matches_oracle_on_awkward_lengths() {
        // Bluestein paths (15, 60) under nontrivial partitions
        for (shape, pdims, dims) in [
            (vec![15usize, 16], vec![3usize, 2], vec![0usize, 1]),
            (vec![60, 8], vec![4, 2], vec![0, 1]),
            (vec![6, 8, 15], vec![2, 2, 2], vec![0, 1, 2]),
            (vec![4, 60], vec![8, 1], vec![1]),
        ] {
            let p = Partition::new(&pdims).unwrap();
            let want = sequential_reference(&shape, &dims, 9, Direction::Forward);
            let plan = plan_dfft(&p, &shape, &dims).unwrap();
            let out = launch(p.total_workers(), |ctx| {
                let x = hashed_tensor(&p, &shape, ctx.rank(), 9);
                let f = dfft_forward(ctx, &plan, &x)?;
                gather_full(ctx, &f.tensor)
            })
            .unwrap();
            assert!(max_err(&out[0], &want) < 1e-11, "shape {shape:?} part {pdims:?}");
        }
    }

    #[test]
    fn constant_tensor_concentrates_at_zero_frequency() {
        let shape = [4usize, 6];
        let p = Partition::new(&[2, 2]).unwrap();
        let plan = plan_dfft(&p, &shape, &[0, 1]).unwrap();
        let out = launch(4, |ctx| {
            let x = DistTensor::from_fn(&p, &shape, ctx.rank(), |_| Complex64::new(1.0, 0.0))?;
            let f = dfft_forward(ctx, &plan, &x)?;
            gather_full(ctx, &f.tensor)
        })
        .unwrap();
        let got = &out[0];
        let expect0 = (volume(&shape) as f64).sqrt();
        assert!((got[0] - Complex64::new(expect0, 0.0)).norm() < 1e-12);
        for &v in &got[1..] {
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn unitarity_and_round_trip() {
        let shape = [20usize, 16, 16, 8];
        let p = Partition::new(&[1, 2, 2, 1]).unwrap();
        let plan = plan_dfft(&p, &shape, &[1, 2, 3]).unwrap();
        let out = launch(4, |ctx| {
            let x = hashed_tensor(&p, &shape, ctx.rank(), 21);
            let nx = norm_l2(ctx, &x)?;
            let f = dfft_forward(ctx, &plan, &x)?;
            let nf = norm_l2(ctx, &f.tensor)?;
            let back = dfft_inverse(ctx, &plan, &f)?;
            let err = x
                .local()
                .iter()
                .zip(back.local())
                .map(|(&a, &b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            Ok(((nx - nf).abs() / nx, err / nx))
        })
        .unwrap();
        for (norm_gap, rt_err) in out {
            assert!(norm_gap < 1e-12, "norm gap {norm_gap}");
            assert!(rt_err < 1e-12, "round trip err {rt_err}");
        }
    }

    #[test]
    fn adjoint_equals_inverse_inner_product_identity() {
        // <F x, y> == <x, F' y> with F' realized by dfft_adjoint
        let shape = [6usize, 8];
        let p = Partition::new(&[2, 2]).unwrap();
        let plan = plan_dfft(&p, &shape, &[0, 1]).unwrap();
        let out = launch(4, |ctx| {
            let x = hashed_tensor(&p, &shape, ctx.rank(), 31);
            let fx = dfft_forward(ctx, &plan, &x)?;
            let y = hashed_tensor(plan.output_partition(), &shape, ctx.rank(), 32);
            let lhs = inner_product(ctx, &fx.tensor, &y)?;
            let field = SpectralField { tensor: y.clone(), transformed_dims: plan.transform_dims.clone() };
            let ay = dfft_adjoint(ctx, &plan, &field)?;
            let rhs = inner_product(ctx, &x, &ay)?;
            Ok((lhs - rhs).norm() / (norm_l2(ctx, &fx.tensor)? * norm_l2(ctx, &y)?))
        })
        .unwrap();
        for d in out {
            assert!(d < 1e-12, "adjoint discrepancy {d}");
        }
    }

    #[test]
    fn separability_across_plans() {
        // one plan over {0,1} equals a chain of plans over {1} then {0}
        let shape = [6usize, 10];
        let p = Partition::new(&[2, 1]).unwrap();
        let joint = plan_dfft(&p, &shape, &[0, 1]).unwrap();
        let out = launch(2, |ctx| {
            let x = hashed_tensor(&p, &shape, ctx.rank(), 55);
            let a = dfft_forward(ctx, &joint, &x)?;
            let ga = gather_full(ctx, &a.tensor)?;

            let first = plan_dfft(&p, &shape, &[1]).unwrap();
            let b1 = dfft_forward(ctx, &first, &x)?;
            let back_on_p = crate::collective::repartition(ctx, &b1.tensor, &p)?;
            let second = plan_dfft(&p, &shape, &[0]).unwrap();
            let b2 = dfft_forward(ctx, &second, &back_on_p)?;
            let gb = gather_full(ctx, &b2.tensor)?;
            Ok((ga, gb))
        })
        .unwrap();
        let (ga, gb) = &out[0];
        assert!(max_err(ga, gb) < 1e-12);
    }

    #[test]
    fn plan_rejects_bad_inputs() {
        let p = Partition::new(&[2, 1]).unwrap();
        assert!(plan_dfft(&p, &[8, 8], &[]).is_err());
        assert!(plan_dfft(&p, &[8, 8], &[2]).is_err());
        assert!(plan_dfft(&p, &[8], &[0]).is_err());
        // workers cannot be placed: transforming everything with > 1 worker
        // leaves no index space
        let big = Partition::new(&[16, 1]).unwrap();
        assert!(matches!(plan_dfft(&big, &[16, 4], &[0, 1]), Err(Error::Plan(_))));
    }
}
