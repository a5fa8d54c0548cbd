//! Built-in verification suites: adjoint identities, the distributed-FFT
//! oracle, sequential-vs-distributed spectral convolution, whole-network
//! partition invariance, finite-difference gradient checks, and tensor-file
//! round trips. The selftest command and the acceptance tests both run
//! these.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collective::{adjoint_check, gather_full, LinearOp};
use crate::dfft::plan_dfft;
use crate::error::Result;
use crate::fft::{local_fft, Direction};
use crate::model::autodiff::{fno_backward, fno_forward, ModelGrads, Tape};
use crate::model::config::{Activation, FnoConfig};
use crate::model::layers::{mode_ownership, spectral_conv};
use crate::model::loss::relative_l2_loss_grad;
use crate::model::params::{
    mode_matrix, mode_partner, retained_linear_index, unfold_mode, FnoModel,
    SpectralEntry, SpectralWeights,
};
use crate::model::reference::{reference_forward, DenseModel, DenseTensor};
use crate::partition::{Partition, RegionBox};
use crate::runtime::{allreduce_sum, launch, WorkerContext};
use crate::tensor::{hashed_unit_f64, strides, volume, DistTensor, Scalar};

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub max_discrepancy: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn from_max(name: &'static str, max: f64, tolerance: f64, detail: String) -> Self {
        SuiteReport { name, max_discrepancy: max, tolerance, passed: max < tolerance, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{:<24} {}  max discrepancy {:.3e} (tolerance {:.0e})  {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_discrepancy,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    /// Debug hook: corrupt the broadcast adjoint inside the sweep so the
    /// failure path is exercised end to end.
    pub corrupt_adjoint: bool,
}

/// Run every suite. Failures are reported, not returned as errors.
pub fn run_selftest(opts: &SelftestOptions) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        adjoint_sweep(50, opts.corrupt_adjoint)?,
        dfft_oracle_suite()?,
        spectral_equivalence_suite()?,
        partition_invariance_suite()?,
        gradient_check_suite()?.0,
        file_roundtrip_suite(50)?,
    ])
}

fn sample_dims(rng: &mut ChaCha8Rng, ndim: usize, max_workers: usize) -> Vec<usize> {
    let mut dims: Vec<usize> = (0..ndim).map(|_| rng.gen_range(1..=3)).collect();
    let mut i = 0;
    while dims.iter().product::<usize>() > max_workers {
        if dims[i % ndim] > 1 {
            dims[i % ndim] = 1;
        }
        i += 1;
    }
    dims
}

/// Randomized adjoint identities for broadcast and repartition over
/// partitions of at most 8 workers and shapes with extents at most 12.
pub fn adjoint_sweep(seeds: u64, corrupt: bool) -> Result<SuiteReport> {
    let mut max = 0.0f64;
    let mut cases = 0usize;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0xAD01 ^ (seed * 7919));
        let ndim = rng.gen_range(1..=3);
        let shape: Vec<usize> = (0..ndim).map(|_| rng.gen_range(1..=12)).collect();

        // repartition between independent grids
        let src = Partition::new(&sample_dims(&mut rng, ndim, 8))?;
        let dst = Partition::new(&sample_dims(&mut rng, ndim, 8))?;
        let workers = src.total_workers().max(dst.total_workers());
        let op = LinearOp::<f64>::repartition(src, dst, shape.clone());
        let worst = launch(workers, |ctx| adjoint_check(ctx, &op, seed))?;
        max = max.max(worst[0]);
        cases += 1;

        // broadcast from a grid with some dimensions collapsed to 1
        let dst = Partition::new(&sample_dims(&mut rng, ndim, 8))?;
        let src_dims: Vec<usize> = dst
            .dims()
            .iter()
            .map(|&d| if rng.gen_bool(0.5) { 1 } else { d })
            .collect();
        let src = Partition::new(&src_dims)?;
        let workers = dst.total_workers().max(src.total_workers());
        let mut op = LinearOp::<f64>::broadcast(src.clone(), dst, shape.clone());
        if corrupt {
            let inner = op.adjoint;
            op.adjoint = Box::new(move |ctx, g| {
                let mut out = inner(ctx, g)?;
                out.scale_in_place(1.0 + 1e-6);
                Ok(out)
            });
        }
        let worst = launch(workers, |ctx| adjoint_check(ctx, &op, seed ^ 0x55))?;
        max = max.max(worst[0]);
        cases += 1;
    }
    Ok(SuiteReport::from_max("adjoint-sweep", max, 1e-10, format!("{cases} cases")))
}

/// Distributed FFT against gather-then-sequential-FFT, plus unitarity, over
/// shapes that exercise both radix-2 and Bluestein lengths.
pub fn dfft_oracle_suite() -> Result<SuiteReport> {
    let cases: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = vec![
        (vec![60, 16], vec![2, 1], vec![0, 1]),
        (vec![15, 8, 6], vec![1, 2, 2], vec![0, 1, 2]),
        (vec![16, 15], vec![4, 2], vec![0, 1]),
        (vec![8, 60], vec![8, 1], vec![0, 1]),
        (vec![6, 4, 16], vec![2, 2, 2], vec![1, 2]),
        (vec![4, 6, 8], vec![1, 2, 3], vec![0, 1, 2]),
    ];
    let mut max_vs_oracle = 0.0f64;
    let mut max_unitarity = 0.0f64;
    for (i, (shape, pdims, dims)) in cases.iter().enumerate() {
        let seed = 100 + i as u64;
        // sequential oracle on the full tensor
        let n = volume(shape);
        let mut want: Vec<Complex64> = (0..n as u64).map(|j| Complex64::hashed_unit(seed, j)).collect();
        let norm_in: f64 = want.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        local_fft(&mut want, shape, dims, Direction::Forward)?;

        let p = Partition::new(pdims)?;
        let plan = plan_dfft(&p, shape, dims)?;
        let results = launch(p.total_workers(), |ctx| {
            let x = DistTensor::<Complex64>::from_fn(&p, shape, ctx.rank(), |idx| {
                let mut lin = 0u64;
                for (d, &v) in idx.iter().enumerate() {
                    lin = lin * shape[d] as u64 + v as u64;
                }
                Complex64::hashed_unit(seed, lin)
            })?;
            let f = crate::dfft::dfft_forward(ctx, &plan, &x)?;
            let back = crate::dfft::dfft_inverse(ctx, &plan, &f)?;
            let rt: f64 = back
                .local()
                .iter()
                .zip(x.local())
                .map(|(&a, &b)| (a - b).norm())
                .fold(0.0, f64::max);
            let gathered = gather_full(ctx, &f.tensor)?;
            Ok((gathered, rt))
        })?;
        let (got, _) = &results[0];
        let err = got
            .iter()
            .zip(&want)
            .map(|(&a, &b)| (a - b).norm())
            .fold(0.0f64, f64::max)
            / norm_in.max(1e-30);
        max_vs_oracle = max_vs_oracle.max(err);
        let norm_out: f64 = got.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        max_unitarity = max_unitarity.max((norm_out - norm_in).abs() / norm_in);
        for (_, rt) in &results {
            max_unitarity = max_unitarity.max(rt / norm_in);
        }
    }
    let mut report = SuiteReport::from_max(
        "dfft-oracle",
        max_vs_oracle,
        1e-10,
        format!("unitarity gap {max_unitarity:.3e} (tolerance 1e-12)"),
    );
    report.passed = report.passed && max_unitarity < 1e-12;
    Ok(report)
}

/// Dense sequential spectral convolution used as the oracle: full transform,
/// per-retained-mode matrix multiply, zero elsewhere, inverse transform.
#[allow(clippy::too_many_arguments)]
fn dense_spectral_oracle(
    input: &[f64],
    shape: &[usize],
    transform_dims: &[usize],
    modes: &[usize],
    sizes: &[usize],
    retained: &[usize],
    weights: &[Complex64],
    channels: usize,
) -> Result<Vec<f64>> {
    let st = strides(shape);
    let cs = st[1];
    let batch = shape[0];
    let mut spec: Vec<Complex64> = input.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    local_fft(&mut spec, shape, transform_dims, Direction::Forward)?;
    let mut out = vec![Complex64::new(0.0, 0.0); spec.len()];
    let r_total: usize = retained.iter().product();
    for lin in 0..r_total {
        let mut rem = lin;
        let mut offset = 0usize;
        for j in (0..retained.len()).rev() {
            let g = unfold_mode(sizes[j], modes[j], rem % retained[j]);
            rem /= retained[j];
            offset += g * st[transform_dims[j]];
        }
        let mat = &weights[lin * channels * channels..(lin + 1) * channels * channels];
        for b in 0..batch {
            let p = b * st[0] + offset;
            for oc in 0..channels {
                let mut acc = Complex64::new(0.0, 0.0);
                for ic in 0..channels {
                    acc += mat[oc * channels + ic] * spec[p + ic * cs];
                }
                out[p + oc * cs] = acc;
            }
        }
    }
    local_fft(&mut out, shape, transform_dims, Direction::Inverse)?;
    Ok(out.iter().map(|z| z.re).collect())
}

fn build_shard(
    partition: &Partition,
    shape: &[usize],
    transform_dims: &[usize],
    modes: &[usize],
    sizes: &[usize],
    retained: &[usize],
    channels: usize,
    seed: u64,
    rank: usize,
) -> Result<SpectralWeights> {
    let freq_box = partition.region_or_empty(rank, shape)?;
    let owned = mode_ownership(&freq_box, modes, sizes, transform_dims)?;
    let entries = owned
        .into_iter()
        .map(|(global, local)| {
            let (matrix, live) = mode_matrix(seed, 0, modes, sizes, retained, &global, channels, channels);
            SpectralEntry { global, local, matrix, live }
        })
        .collect();
    Ok(SpectralWeights {
        out_dim: channels,
        in_dim: channels,
        modes: modes.to_vec(),
        retained: retained.to_vec(),
        entries,
    })
}

/// Sequential versus distributed spectral convolution, covering a 3x3
/// spatial partition of 2-d data and a 3-d-plus-time layout on 8 workers.
pub fn spectral_equivalence_suite() -> Result<SuiteReport> {
    let cases: Vec<(Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> = vec![
        // (partition, shape, transform dims, modes): 2-d data on 3x3 workers
        (vec![1, 1, 3, 3], vec![1, 4, 12, 12], vec![2, 3], vec![3, 3]),
        // 3-d plus time on 8 workers
        (vec![1, 1, 2, 2, 2, 1], vec![1, 4, 8, 8, 8, 6], vec![2, 3, 4, 5], vec![2, 2, 2, 2]),
    ];
    let mut max_err = 0.0f64;
    for (case_idx, (pdims, shape, tdims, modes)) in cases.iter().enumerate() {
        let seed = 900 + case_idx as u64;
        let channels = shape[1];
        let sizes: Vec<usize> = tdims.iter().map(|&d| shape[d]).collect();
        let retained: Vec<usize> = modes.iter().zip(&sizes).map(|(&m, &n)| (2 * m).min(n)).collect();
        let r_total: usize = retained.iter().product();

        // dense weights assembled from the same per-mode streams
        let mut dense_weights = Vec::with_capacity(r_total * channels * channels);
        for lin in 0..r_total {
            let mut rem = lin;
            let mut global = vec![0usize; retained.len()];
            for j in (0..retained.len()).rev() {
                global[j] = unfold_mode(sizes[j], modes[j], rem % retained[j]);
                rem /= retained[j];
            }
            let (mat, _) = mode_matrix(seed, 0, modes, &sizes, &retained, &global, channels, channels);
            dense_weights.extend(mat);
        }

        let n = volume(shape);
        let input: Vec<f64> = (0..n as u64).map(|j| hashed_unit_f64(seed ^ 0xF00D, j)).collect();
        let want = dense_spectral_oracle(&input, shape, tdims, modes, &sizes, &retained, &dense_weights, channels)?;

        let p = Partition::new(pdims)?;
        let plan = plan_dfft(&p, shape, tdims)?;
        let freq_partition = plan.output_partition().clone();
        let results = launch(p.total_workers(), |ctx| {
            let weights = build_shard(&freq_partition, shape, tdims, modes, &sizes, &retained, channels, seed, ctx.rank())?;
            let x = DistTensor::from_global(&p, shape, ctx.rank(), &input)?;
            let (y, _) = spectral_conv(ctx, &x, &weights, &plan)?;
            gather_full(ctx, &y)
        })?;
        let scale = want.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-30);
        let err = results[0]
            .iter()
            .zip(&want)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            / scale;
        max_err = max_err.max(err);
    }
    Ok(SuiteReport::from_max("spectral-equivalence", max_err, 1e-10, "2 layouts".into()))
}

/// The configuration pinned by the partition-invariance acceptance check:
/// 3-d plus time input `(1, 2, 16, 16, 16, 1)` lifted to 10 timesteps.
pub fn invariance_config(partition: Vec<usize>) -> FnoConfig {
    FnoConfig {
        partition,
        spatial_shape: vec![16, 16, 16],
        in_channels: 2,
        out_channels: 1,
        out_timesteps: 10,
        width: 20,
        num_blocks: 4,
        modes: vec![4, 4, 4, 2],
        activation: Activation::Relu,
    }
}

/// Gathered forward output agreement across 1/2/4/8-worker layouts (and the
/// sequential dense reference) for the pinned configuration.
pub fn partition_invariance_suite() -> Result<SuiteReport> {
    let seed = 4242;
    let base = invariance_config(vec![1, 1, 1, 1, 1, 1]);
    let input_shape = base.input_shape();
    let n = volume(&input_shape);
    let input: Vec<f64> = (0..n as u64).map(|j| hashed_unit_f64(31337, j)).collect();

    let dense = DenseModel::init(&base, seed)?;
    let reference = reference_forward(&dense, &DenseTensor::new(input_shape.clone(), input.clone())?, None)?;

    let layouts: [Vec<usize>; 4] = [
        vec![1, 1, 1, 1, 1, 1],
        vec![1, 1, 2, 1, 1, 1],
        vec![1, 1, 2, 2, 1, 1],
        vec![1, 1, 2, 2, 2, 1],
    ];
    let mut max_err = 0.0f64;
    let mut single: Option<Vec<f64>> = None;
    for pdims in layouts {
        let config = invariance_config(pdims.clone());
        let workers: usize = pdims.iter().product();
        let outputs = launch(workers, |ctx| {
            let model = FnoModel::init(ctx, &config, seed)?;
            let x = DistTensor::from_global(&model.layout.p_input, &model.layout.input_shape, ctx.rank(), &input)?;
            let u = fno_forward(ctx, &model, &x, None)?;
            gather_full(ctx, &u)
        })?;
        let got = &outputs[0];
        let scale = reference.data.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-30);
        if let Some(first) = &single {
            let err = got
                .iter()
                .zip(first)
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0f64, f64::max)
                / scale;
            max_err = max_err.max(err);
        } else {
            single = Some(got.clone());
        }
        let err_ref = got
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            / scale;
        max_err = max_err.max(err_ref);
    }
    Ok(SuiteReport::from_max("partition-invariance", max_err, 1e-8, "layouts 1/2/4/8 + reference".into()))
}

/// Parameter groups probed by the gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    TimeWeight,
    TimeBias,
    ChannelWeight,
    ChannelBias,
    BlockWeight(usize),
    BlockSpectral(usize),
    Projection,
    Input,
}

impl ParamGroup {
    pub fn label(&self) -> String {
        match self {
            ParamGroup::TimeWeight => "time-weight".into(),
            ParamGroup::TimeBias => "time-bias".into(),
            ParamGroup::ChannelWeight => "channel-weight".into(),
            ParamGroup::ChannelBias => "channel-bias".into(),
            ParamGroup::BlockWeight(k) => format!("block{k}-weight"),
            ParamGroup::BlockSpectral(k) => format!("block{k}-spectral"),
            ParamGroup::Projection => "projection".into(),
            ParamGroup::Input => "input".into(),
        }
    }
}

fn real_direction(len: usize, dir_seed: u64) -> Vec<f64> {
    (0..len as u64).map(|i| hashed_unit_f64(dir_seed, i)).collect()
}

/// Direction for a spectral shard, conjugate-symmetric like the weights so
/// the perturbed operator still produces a real field: paired modes get
/// conjugated copies of the canonical draw, self-paired modes real values,
/// inert modes zero.
fn spectral_direction(weights: &SpectralWeights, sizes: &[usize], dir_seed: u64) -> Vec<Vec<Complex64>> {
    let dim = weights.out_dim * weights.in_dim;
    weights
        .entries
        .iter()
        .map(|entry| {
            if !entry.live {
                return vec![Complex64::new(0.0, 0.0); dim];
            }
            let partner = mode_partner(sizes, &entry.global);
            let canonical = if entry.global <= partner { entry.global.clone() } else { partner.clone() };
            let lin = retained_linear_index(&weights.retained, &weights.modes, sizes, &canonical);
            (0..dim as u64)
                .map(|i| {
                    let idx = lin * dim as u64 + i;
                    let mut v = Complex64::new(
                        hashed_unit_f64(dir_seed, 2 * idx),
                        hashed_unit_f64(dir_seed, 2 * idx + 1),
                    );
                    if partner == entry.global {
                        v.im = 0.0;
                    } else if canonical != entry.global {
                        v = v.conj();
                    }
                    v
                })
                .collect()
        })
        .collect()
}

fn apply_group_perturbation(
    model: &mut FnoModel,
    input: &mut DistTensor<f64>,
    group: ParamGroup,
    eps: f64,
    dir_seed: u64,
) {
    let sizes = model.config.transform_sizes();
    match group {
        ParamGroup::TimeWeight => {
            let v = real_direction(model.time_affine.weight.len(), dir_seed);
            for (p, d) in model.time_affine.weight.iter_mut().zip(v) {
                *p += eps * d;
            }
        }
        ParamGroup::TimeBias => {
            let b = model.time_affine.bias.as_mut().unwrap();
            let v = real_direction(b.len(), dir_seed);
            for (p, d) in b.iter_mut().zip(v) {
                *p += eps * d;
            }
        }
        ParamGroup::ChannelWeight => {
            let v = real_direction(model.channel_affine.weight.len(), dir_seed);
            for (p, d) in model.channel_affine.weight.iter_mut().zip(v) {
                *p += eps * d;
            }
        }
        ParamGroup::ChannelBias => {
            let b = model.channel_affine.bias.as_mut().unwrap();
            let v = real_direction(b.len(), dir_seed);
            for (p, d) in b.iter_mut().zip(v) {
                *p += eps * d;
            }
        }
        ParamGroup::BlockWeight(k) => {
            let v = real_direction(model.blocks[k].channel.weight.len(), dir_seed);
            for (p, d) in model.blocks[k].channel.weight.iter_mut().zip(v) {
                *p += eps * d;
            }
        }
        ParamGroup::BlockSpectral(k) => {
            let dirs = spectral_direction(&model.blocks[k].spectral, &sizes, dir_seed);
            for (entry, dir) in model.blocks[k].spectral.entries.iter_mut().zip(dirs) {
                for (p, d) in entry.matrix.iter_mut().zip(dir) {
                    *p += d * eps;
                }
            }
        }
        ParamGroup::Projection => {
            let v = real_direction(model.projection.weight.len(), dir_seed);
            for (p, d) in model.projection.weight.iter_mut().zip(v) {
                *p += eps * d;
            }
        }
        ParamGroup::Input => {
            let shape: Vec<usize> = input.global_shape().to_vec();
            let b = input.local_box().clone();
            let mut idx = b.starts();
            if b.is_empty() {
                return;
            }
            let mut flat = 0usize;
            loop {
                let mut lin = 0u64;
                for (d, &i) in idx.iter().enumerate() {
                    lin = lin * shape[d] as u64 + i as u64;
                }
                input.local_mut()[flat] += eps * hashed_unit_f64(dir_seed, lin);
                flat += 1;
                let mut d = idx.len();
                loop {
                    if d == 0 {
                        return;
                    }
                    d -= 1;
                    idx[d] += 1;
                    if idx[d] < b.range(d).stop {
                        break;
                    }
                    idx[d] = b.range(d).start;
                }
            }
        }
    }
}

/// Inner product of the computed gradient with the (deterministic) direction
/// for one group, summed over all workers.
fn grad_dot_direction(
    ctx: &mut WorkerContext,
    model: &FnoModel,
    grads: &ModelGrads,
    input_grad: &DistTensor<f64>,
    group: ParamGroup,
    dir_seed: u64,
) -> Result<f64> {
    let sizes = model.config.transform_sizes();
    let local = match group {
        ParamGroup::TimeWeight => dot_real(&grads.time_weight, dir_seed, ctx.rank() == 0),
        ParamGroup::TimeBias => dot_real(&grads.time_bias, dir_seed, ctx.rank() == 0),
        ParamGroup::ChannelWeight => dot_real(&grads.channel_weight, dir_seed, ctx.rank() == 0),
        ParamGroup::ChannelBias => dot_real(&grads.channel_bias, dir_seed, ctx.rank() == 0),
        ParamGroup::BlockWeight(k) => dot_real(&grads.block_weights[k], dir_seed, ctx.rank() == 0),
        ParamGroup::Projection => dot_real(&grads.projection_weight, dir_seed, ctx.rank() == 0),
        ParamGroup::BlockSpectral(k) => {
            let dirs = spectral_direction(&model.blocks[k].spectral, &sizes, dir_seed);
            grads.block_spectral[k]
                .iter()
                .zip(dirs)
                .flat_map(|(g, d)| g.iter().zip(d).map(|(gv, dv)| gv.re * dv.re + gv.im * dv.im).collect::<Vec<_>>())
                .sum()
        }
        ParamGroup::Input => {
            let shape: Vec<usize> = input_grad.global_shape().to_vec();
            let b = input_grad.local_box().clone();
            let mut acc = 0.0;
            if !b.is_empty() {
                let mut idx = b.starts();
                let mut flat = 0usize;
                'sum: loop {
                    let mut lin = 0u64;
                    for (d, &i) in idx.iter().enumerate() {
                        lin = lin * shape[d] as u64 + i as u64;
                    }
                    acc += input_grad.local()[flat] * hashed_unit_f64(dir_seed, lin);
                    flat += 1;
                    let mut d = idx.len();
                    loop {
                        if d == 0 {
                            break 'sum;
                        }
                        d -= 1;
                        idx[d] += 1;
                        if idx[d] < b.range(d).stop {
                            break;
                        }
                        idx[d] = b.range(d).start;
                    }
                }
            }
            acc
        }
    };
    let total = allreduce_sum(ctx, model.layout.p_input.id(), &[local])?;
    Ok(total[0])
}

fn dot_real(grad: &[f64], dir_seed: u64, at_root: bool) -> f64 {
    if !at_root {
        return 0.0;
    }
    grad.iter()
        .enumerate()
        .map(|(i, &g)| g * hashed_unit_f64(dir_seed, i as u64))
        .sum()
}

/// Tiny model pinned by the gradient-check acceptance criterion.
pub fn gradient_check_config() -> FnoConfig {
    FnoConfig {
        partition: vec![1, 1, 2, 1, 1, 1],
        spatial_shape: vec![8, 8, 4],
        in_channels: 1,
        out_channels: 1,
        out_timesteps: 4,
        width: 4,
        num_blocks: 2,
        modes: vec![2, 2, 2, 2],
        activation: Activation::Relu,
    }
}

fn eval_loss(
    config: &FnoConfig,
    seed: u64,
    input: &[f64],
    target: &[f64],
    perturb: Option<(ParamGroup, f64, u64)>,
) -> Result<f64> {
    let workers: usize = config.partition.iter().product();
    let losses = launch(workers, |ctx| {
        let mut model = FnoModel::init(ctx, config, seed)?;
        let mut x = DistTensor::from_global(&model.layout.p_input, &model.layout.input_shape, ctx.rank(), input)?;
        if let Some((group, eps, ds)) = perturb {
            apply_group_perturbation(&mut model, &mut x, group, eps, ds);
        }
        let t = DistTensor::from_global(&model.layout.p_channel, &model.layout.output_shape, ctx.rank(), target)?;
        let y = fno_forward(ctx, &model, &x, None)?;
        crate::model::loss::relative_lp_loss(ctx, &y, &t, 2.0)
    })?;
    Ok(losses[0])
}

/// Adjoint gradients against central finite differences (directional
/// derivatives, eps = 1e-6) for every parameter group and the input.
pub fn gradient_check_suite() -> Result<(SuiteReport, Vec<(String, f64)>)> {
    let config = gradient_check_config();
    let seed = 2718;
    let eps = 1e-6;
    let input: Vec<f64> = (0..volume(&config.input_shape()) as u64)
        .map(|j| hashed_unit_f64(808, j))
        .collect();
    let target: Vec<f64> = (0..volume(&config.output_shape()) as u64)
        .map(|j| 0.5 + hashed_unit_f64(809, j))
        .collect();

    let mut groups = vec![
        ParamGroup::TimeWeight,
        ParamGroup::TimeBias,
        ParamGroup::ChannelWeight,
        ParamGroup::ChannelBias,
    ];
    for k in 0..config.num_blocks {
        groups.push(ParamGroup::BlockWeight(k));
        groups.push(ParamGroup::BlockSpectral(k));
    }
    groups.push(ParamGroup::Projection);
    groups.push(ParamGroup::Input);

    // one distributed backward pass supplies every directional derivative
    let workers: usize = config.partition.iter().product();
    let group_list = groups.clone();
    let config_ref = &config;
    let input_ref = &input;
    let target_ref = &target;
    let dots = launch(workers, move |ctx| {
        let model = FnoModel::init(ctx, config_ref, seed)?;
        let x = DistTensor::from_global(&model.layout.p_input, &model.layout.input_shape, ctx.rank(), input_ref)?;
        let t = DistTensor::from_global(&model.layout.p_channel, &model.layout.output_shape, ctx.rank(), target_ref)?;
        let mut tape = Tape::new();
        let y = fno_forward(ctx, &model, &x, Some(&mut tape))?;
        let (_, grad) = relative_l2_loss_grad(ctx, &y, &t)?;
        let (grads, gx) = fno_backward(ctx, &model, tape, &grad)?;
        let mut out = Vec::with_capacity(group_list.len());
        for (gi, &group) in group_list.iter().enumerate() {
            out.push(grad_dot_direction(ctx, &model, &grads, &gx, group, 5000 + gi as u64)?);
        }
        Ok(out)
    })?;
    let dots = &dots[0];

    let mut rows = Vec::with_capacity(groups.len());
    let mut max_rel = 0.0f64;
    for (gi, &group) in groups.iter().enumerate() {
        let ds = 5000 + gi as u64;
        let plus = eval_loss(&config, seed, &input, &target, Some((group, eps, ds)))?;
        let minus = eval_loss(&config, seed, &input, &target, Some((group, -eps, ds)))?;
        let fd = (plus - minus) / (2.0 * eps);
        let dot = dots[gi];
        let rel = (fd - dot).abs() / dot.abs().max(fd.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
        rows.push((group.label(), rel));
    }
    Ok((
        SuiteReport::from_max("gradient-check", max_rel, 1e-5, format!("{} groups", groups.len())),
        rows,
    ))
}

/// Bitwise tensor-file round trips plus randomized region reads against a
/// direct indexing oracle.
pub fn file_roundtrip_suite(num_cases: u64) -> Result<SuiteReport> {
    let dir = std::env::temp_dir().join(format!("dfno-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(515);
    let mut max = 0.0f64;
    let mut cases = 0usize;
    for case in 0..num_cases {
        let ndim = rng.gen_range(1..=4);
        let dims: Vec<usize> = (0..ndim).map(|_| rng.gen_range(1..=8)).collect();
        let chunk: Vec<usize> = dims.iter().map(|&n| rng.gen_range(1..=n + 1)).collect();
        let data: Vec<f64> = (0..volume(&dims)).map(|i| hashed_unit_f64(case, i as u64)).collect();
        let path = dir.join(format!("t{case}.dfno"));
        crate::tensorfile::write_tensor(&path, &dims, &chunk, &data)?;
        let (_, full) = crate::tensorfile::read_tensor::<f64>(&path)?;
        if full.iter().zip(&data).any(|(a, b)| a.to_bits() != b.to_bits()) {
            max = 1.0;
        }
        let region = RegionBox::new(
            dims.iter()
                .map(|&n| {
                    let a = rng.gen_range(0..=n);
                    let b = rng.gen_range(a..=n);
                    crate::partition::IndexRange { start: a, stop: b }
                })
                .collect(),
        );
        let got = crate::tensorfile::read_region::<f64>(&path, &region)?;
        let want = crate::tensor::extract_region(&data, &RegionBox::full(&dims), &region);
        if got != want {
            max = 1.0;
        }
        cases += 1;
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(SuiteReport::from_max(
        "file-roundtrip",
        max,
        0.5,
        format!("{cases} randomized cases, bitwise"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjoint_sweep_short_passes() {
        let report = adjoint_sweep(6, false).unwrap();
        assert!(report.passed, "{}", report.line());
    }

    #[test]
    fn corrupted_adjoint_is_reported_as_failure() {
        let report = adjoint_sweep(3, true).unwrap();
        assert!(!report.passed);
        assert!(report.max_discrepancy > 1e-10);
    }

    #[test]
    fn spectral_equivalence_holds() {
        let report = spectral_equivalence_suite().unwrap();
        assert!(report.passed, "{}", report.line());
    }

    #[test]
    fn file_roundtrip_suite_passes() {
        let report = file_roundtrip_suite(30).unwrap();
        assert!(report.passed, "{}", report.line());
    }
}
