//! Network layers and their adjoints.
//!
//! Pointwise affine layers act along a wholly-local dimension after
//! broadcasting the root's weights, so worker boundaries never show up in
//! the output; their adjoint sum-reduces the per-worker weight gradients
//! back to the root. The spectral convolution transforms to the frequency
//! domain, applies each owned retained mode's channel-mixing matrix, zeroes
//! everything else, and transforms back.

use num_complex::Complex64;

use crate::dfft::{dfft_forward, dfft_inverse, DfftPlan, SpectralField};
use crate::error::{Error, Result};
use crate::partition::RegionBox;
use crate::runtime::{allreduce_sum, group_broadcast, reduce_sum, WorkerContext};
use crate::tensor::{strides, DistTensor};

use super::config::Activation;
use super::params::{AffineParams, FnoBlockParams, SpectralWeights};

/// Inputs saved by the affine forward pass for its adjoint.
#[derive(Debug, Clone)]
pub struct AffineSaved {
    pub input: DistTensor<f64>,
    pub weight: Vec<f64>,
    pub out_dim: usize,
    pub in_dim: usize,
    pub has_bias: bool,
    pub dim: usize,
}

fn affine_kernel(
    x: &[f64],
    local_shape: &[usize],
    dim: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_dim: usize,
    in_dim: usize,
) -> Vec<f64> {
    let inner: usize = local_shape[dim + 1..].iter().product();
    let outer: usize = local_shape[..dim].iter().product();
    let mut y = vec![0.0; outer * out_dim * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base_in = o * in_dim * inner + i;
            let base_out = o * out_dim * inner + i;
            for oc in 0..out_dim {
                let mut acc = bias.map_or(0.0, |b| b[oc]);
                let wrow = &weight[oc * in_dim..(oc + 1) * in_dim];
                for (ic, &w) in wrow.iter().enumerate() {
                    acc += w * x[base_in + ic * inner];
                }
                y[base_out + oc * inner] = acc;
            }
        }
    }
    y
}

/// Apply `y = Wx + b` along dimension `dim`, which must be wholly local.
/// The root's weights are broadcast to every worker first, so all workers
/// contract against identical parameters.
pub fn affine_pointwise(
    ctx: &mut WorkerContext,
    x: &DistTensor<f64>,
    params: &AffineParams,
    dim: usize,
) -> Result<(DistTensor<f64>, AffineSaved)> {
    if dim >= x.global_shape().len() {
        return Err(Error::invalid(format!("affine dimension {dim} out of range")));
    }
    if x.partition().dims()[dim] != 1 {
        return Err(Error::invalid(format!(
            "affine acting dimension {dim} is distributed over {} workers",
            x.partition().dims()[dim]
        )));
    }
    if params.in_dim != x.global_shape()[dim] {
        return Err(Error::invalid(format!(
            "weight expects {} inputs but dimension {dim} has extent {}",
            params.in_dim,
            x.global_shape()[dim]
        )));
    }
    if params.weight.len() != params.out_dim * params.in_dim {
        return Err(Error::invalid("weight matrix does not match its dimensions"));
    }
    if let Some(b) = &params.bias {
        if b.len() != params.out_dim {
            return Err(Error::invalid("bias length does not match out_dim"));
        }
    }

    // Broadcast the root's master copy: weight, then bias.
    let mut packed = params.weight.clone();
    if let Some(b) = &params.bias {
        packed.extend_from_slice(b);
    }
    let everyone: Vec<usize> = (0..ctx.num_workers()).collect();
    let packed = group_broadcast(ctx, x.partition().id(), 0, &everyone, &packed)?
        .ok_or_else(|| Error::protocol("affine broadcast did not reach this worker"))?;
    let (weight, bias) = packed.split_at(params.out_dim * params.in_dim);
    let bias = params.bias.is_some().then_some(bias);

    let local_shape = x.local_box().shape();
    let y = affine_kernel(x.local(), &local_shape, dim, weight, bias, params.out_dim, params.in_dim);

    let mut out_shape = x.global_shape().to_vec();
    out_shape[dim] = params.out_dim;
    let mut out_ranges = x.local_box().ranges().to_vec();
    out_ranges[dim] = crate::partition::IndexRange { start: 0, stop: params.out_dim };
    let out =
        DistTensor::from_parts(x.partition(), &out_shape, RegionBox::new(out_ranges), y)?;

    let saved = AffineSaved {
        input: x.clone(),
        weight: weight.to_vec(),
        out_dim: params.out_dim,
        in_dim: params.in_dim,
        has_bias: params.bias.is_some(),
        dim,
    };
    Ok((out, saved))
}

/// Adjoint of [`affine_pointwise`]: propagates the cotangent to the input
/// and sum-reduces the weight/bias gradients onto the root in ascending rank
/// order. Non-root workers get `None` for the parameter gradients.
pub fn affine_backward(
    ctx: &mut WorkerContext,
    saved: &AffineSaved,
    gy: &DistTensor<f64>,
) -> Result<(DistTensor<f64>, Option<(Vec<f64>, Vec<f64>)>)> {
    let x = &saved.input;
    let local_shape = x.local_box().shape();
    let dim = saved.dim;
    let (out_dim, in_dim) = (saved.out_dim, saved.in_dim);
    if gy.global_shape()[dim] != out_dim {
        return Err(Error::invalid("cotangent does not match the affine output"));
    }

    let inner: usize = local_shape[dim + 1..].iter().product();
    let outer: usize = local_shape[..dim].iter().product();
    let mut gw = vec![0.0; out_dim * in_dim];
    let mut gb = vec![0.0; if saved.has_bias { out_dim } else { 0 }];
    let mut gx = vec![0.0; x.local().len()];
    let g = gy.local();
    let xv = x.local();
    for o in 0..outer {
        for i in 0..inner {
            let base_in = o * in_dim * inner + i;
            let base_out = o * out_dim * inner + i;
            for oc in 0..out_dim {
                let gout = g[base_out + oc * inner];
                if saved.has_bias {
                    gb[oc] += gout;
                }
                let wrow = &saved.weight[oc * in_dim..(oc + 1) * in_dim];
                let grow = &mut gw[oc * in_dim..(oc + 1) * in_dim];
                for ic in 0..in_dim {
                    grow[ic] += gout * xv[base_in + ic * inner];
                    gx[base_in + ic * inner] += wrow[ic] * gout;
                }
            }
        }
    }

    // Adjoint of the weight broadcast: fixed-order sum-reduction to the root.
    let mut packed = gw;
    packed.extend_from_slice(&gb);
    let everyone: Vec<usize> = (0..ctx.num_workers()).collect();
    let reduced = reduce_sum(ctx, x.partition().id(), &everyone, 0, &packed)?;
    let root_grads = reduced.map(|mut buf| {
        let bias = buf.split_off(out_dim * in_dim);
        (buf, bias)
    });

    let gx = DistTensor::from_parts(x.partition(), x.global_shape(), x.local_box().clone(), gx)?;
    Ok((gx, root_grads))
}

/// Retained frequency indices a worker owns, as (global, box-relative)
/// multi-indices over the transformed dimensions. Per dimension the retained
/// set is the low positive and negative frequencies
/// `{0..m} ∪ {n-m..n}`; a worker whose block misses the retained set in any
/// dimension owns nothing and multiplies by zero.
#[allow(clippy::type_complexity)]
pub fn mode_ownership(
    freq_box: &RegionBox,
    modes: &[usize],
    freq_sizes: &[usize],
    transform_dims: &[usize],
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if modes.len() != transform_dims.len() || freq_sizes.len() != transform_dims.len() {
        return Err(Error::invalid("modes/sizes must align with the transformed dimensions"));
    }
    for (&m, &n) in modes.iter().zip(freq_sizes) {
        if m == 0 || 2 * m > n {
            return Err(Error::invalid(format!(
                "mode count {m} invalid for extent {n}"
            )));
        }
    }
    if freq_box.is_empty() {
        return Ok(Vec::new());
    }
    // Ascending retained indices per dimension, restricted to the box.
    let mut per_dim: Vec<Vec<usize>> = Vec::with_capacity(transform_dims.len());
    for (j, &d) in transform_dims.iter().enumerate() {
        let (m, n) = (modes[j], freq_sizes[j]);
        let r = freq_box.range(d);
        let kept: Vec<usize> = (r.start..r.stop)
            .filter(|&g| g < m || g >= n - m)
            .collect();
        if kept.is_empty() {
            return Ok(Vec::new());
        }
        per_dim.push(kept);
    }
    // Cartesian product in lexicographic order of the global indices.
    let mut result = Vec::new();
    let mut idx = vec![0usize; per_dim.len()];
    'outer: loop {
        let global: Vec<usize> = idx.iter().zip(&per_dim).map(|(&i, kept)| kept[i]).collect();
        let local: Vec<usize> = global
            .iter()
            .zip(transform_dims)
            .map(|(&g, &d)| g - freq_box.range(d).start)
            .collect();
        result.push((global, local));
        let mut j = per_dim.len();
        loop {
            if j == 0 {
                break 'outer;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < per_dim[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
    Ok(result)
}

/// Spectral-domain inputs saved at the owned modes for the adjoint: one
/// `free x in_dim` block per entry, where the free extent multiplies over
/// every non-transformed dimension other than the channel.
#[derive(Debug, Clone)]
pub struct SpectralSaved {
    pub mode_inputs: Vec<Vec<Complex64>>,
}

struct FreqLayout {
    local_strides: Vec<usize>,
    chan_stride: usize,
    /// (stride, extent) per free (non-transformed, non-channel) dimension.
    free: Vec<(usize, usize)>,
    transform_dims: Vec<usize>,
}

impl FreqLayout {
    fn new(freq_box: &RegionBox, transform_dims: &[usize]) -> FreqLayout {
        let local_shape = freq_box.shape();
        let local_strides = strides(&local_shape);
        let free = (0..local_shape.len())
            .filter(|d| *d != 1 && !transform_dims.contains(d))
            .map(|d| (local_strides[d], local_shape[d]))
            .collect();
        FreqLayout {
            chan_stride: local_strides[1],
            local_strides,
            free,
            transform_dims: transform_dims.to_vec(),
        }
    }

    fn mode_offset(&self, local_mode: &[usize]) -> usize {
        local_mode
            .iter()
            .zip(&self.transform_dims)
            .map(|(&i, &d)| i * self.local_strides[d])
            .sum()
    }

    fn free_offsets(&self) -> Vec<usize> {
        let mut offsets = vec![0usize];
        for &(stride, extent) in &self.free {
            let mut next = Vec::with_capacity(offsets.len() * extent);
            for &o in &offsets {
                for e in 0..extent {
                    next.push(o + e * stride);
                }
            }
            offsets = next;
        }
        offsets
    }
}

/// Distributed spectral convolution: forward transform, per-mode channel
/// mixing on the owned retained modes (everything else is zero), inverse
/// transform, and a checked drop of the imaginary residue.
pub fn spectral_conv(
    ctx: &mut WorkerContext,
    x: &DistTensor<f64>,
    weights: &SpectralWeights,
    plan: &DfftPlan,
) -> Result<(DistTensor<f64>, SpectralSaved)> {
    if x.partition().dims()[1] != 1 {
        return Err(Error::invalid("spectral convolution requires a wholly-local channel dimension"));
    }
    if plan.output_partition().dims()[1] != 1 {
        return Err(Error::invalid("frequency-domain partition distributes the channel dimension"));
    }
    if x.global_shape()[1] != weights.in_dim {
        return Err(Error::invalid(format!(
            "spectral weights expect {} channels, tensor has {}",
            weights.in_dim,
            x.global_shape()[1]
        )));
    }

    let xc = x.map(|v| Complex64::new(v, 0.0));
    let spectrum = dfft_forward(ctx, plan, &xc)?;
    let freq_box = spectrum.tensor.local_box().clone();
    let layout = FreqLayout::new(&freq_box, &plan.transform_dims);
    let free_offsets = layout.free_offsets();
    let cs = layout.chan_stride;

    let mut out_spec = vec![Complex64::new(0.0, 0.0); spectrum.tensor.local().len()];
    let xs = spectrum.tensor.local();
    let mut mode_inputs = Vec::with_capacity(weights.entries.len());
    for entry in &weights.entries {
        let base = layout.mode_offset(&entry.local);
        let mut saved = Vec::with_capacity(free_offsets.len() * weights.in_dim);
        for &fo in &free_offsets {
            let p = base + fo;
            for ic in 0..weights.in_dim {
                saved.push(xs[p + ic * cs]);
            }
            for oc in 0..weights.out_dim {
                let row = &entry.matrix[oc * weights.in_dim..(oc + 1) * weights.in_dim];
                let mut acc = Complex64::new(0.0, 0.0);
                for (ic, &w) in row.iter().enumerate() {
                    acc += w * xs[p + ic * cs];
                }
                out_spec[p + oc * cs] = acc;
            }
        }
        mode_inputs.push(saved);
    }

    let out_field = SpectralField {
        tensor: DistTensor::from_parts(
            spectrum.tensor.partition(),
            spectrum.tensor.global_shape(),
            freq_box,
            out_spec,
        )?,
        transformed_dims: spectrum.transformed_dims.clone(),
    };
    let yc = dfft_inverse(ctx, plan, &out_field)?;
    let y = discard_imaginary(ctx, &yc)?;
    Ok((y, SpectralSaved { mode_inputs }))
}

/// Assert the imaginary residue is below 1e-8 relative, then drop it.
fn discard_imaginary(ctx: &mut WorkerContext, z: &DistTensor<Complex64>) -> Result<DistTensor<f64>> {
    let mut im2 = 0.0;
    let mut tot = 0.0;
    for v in z.local() {
        im2 += v.im * v.im;
        tot += v.norm_sqr();
    }
    let sums = allreduce_sum(ctx, z.partition().id(), &[im2, tot])?;
    if sums[1] > 0.0 {
        let rel = (sums[0] / sums[1]).sqrt();
        if rel > 1e-8 {
            return Err(Error::InvalidState(format!(
                "imaginary residue {rel:.3e} exceeds 1e-8 after the inverse transform"
            )));
        }
    }
    Ok(z.map(|v| v.re))
}

/// Adjoint of [`spectral_conv`]: forward-transform the cotangent, apply the
/// conjugate-transposed mode matrices, inverse-transform. Also produces the
/// gradient of every owned mode matrix, which needs no communication.
#[allow(clippy::type_complexity)]
pub fn spectral_conv_backward(
    ctx: &mut WorkerContext,
    weights: &SpectralWeights,
    plan: &DfftPlan,
    saved: &SpectralSaved,
    gy: &DistTensor<f64>,
) -> Result<(DistTensor<f64>, Vec<Vec<Complex64>>)> {
    let gc = gy.map(|v| Complex64::new(v, 0.0));
    let gspec = dfft_forward(ctx, plan, &gc)?;
    let freq_box = gspec.tensor.local_box().clone();
    let layout = FreqLayout::new(&freq_box, &plan.transform_dims);
    let free_offsets = layout.free_offsets();
    let cs = layout.chan_stride;
    if saved.mode_inputs.len() != weights.entries.len() {
        return Err(Error::InvalidState("saved spectral state does not match the weight shard".into()));
    }

    let gs = gspec.tensor.local();
    let mut gx_spec = vec![Complex64::new(0.0, 0.0); gs.len()];
    let mut mat_grads = Vec::with_capacity(weights.entries.len());
    for (entry, saved_in) in weights.entries.iter().zip(&saved.mode_inputs) {
        let mut gmat = vec![Complex64::new(0.0, 0.0); weights.out_dim * weights.in_dim];
        if !entry.live {
            // an inert mode carries no parameters and its matrix is zero,
            // so neither gradient sees it
            mat_grads.push(gmat);
            continue;
        }
        let base = layout.mode_offset(&entry.local);
        for (f, &fo) in free_offsets.iter().enumerate() {
            let p = base + fo;
            let xin = &saved_in[f * weights.in_dim..(f + 1) * weights.in_dim];
            for oc in 0..weights.out_dim {
                let gout = gs[p + oc * cs];
                let wrow = &entry.matrix[oc * weights.in_dim..(oc + 1) * weights.in_dim];
                let grow = &mut gmat[oc * weights.in_dim..(oc + 1) * weights.in_dim];
                for ic in 0..weights.in_dim {
                    grow[ic] += gout * xin[ic].conj();
                    gx_spec[p + ic * cs] += wrow[ic].conj() * gout;
                }
            }
        }
        mat_grads.push(gmat);
    }

    let gx_field = SpectralField {
        tensor: DistTensor::from_parts(
            gspec.tensor.partition(),
            gspec.tensor.global_shape(),
            freq_box,
            gx_spec,
        )?,
        transformed_dims: gspec.transformed_dims.clone(),
    };
    let gxc = dfft_inverse(ctx, plan, &gx_field)?;
    // The forward began by embedding a real tensor; the adjoint of that
    // embedding keeps the real part (the imaginary part is genuinely
    // nonzero here, not a residue).
    Ok((gxc.map(|v| v.re), mat_grads))
}

/// Saved state for one block's adjoint.
#[derive(Debug, Clone)]
pub struct BlockSaved {
    pub affine: AffineSaved,
    pub spectral: SpectralSaved,
    /// Positive-side mask of the rectifier (absent for identity activation).
    pub relu_mask: Option<Vec<bool>>,
}

/// One network block: channel mixing plus spectral convolution, summed and
/// passed through the pointwise activation.
pub fn fno_block(
    ctx: &mut WorkerContext,
    x: &DistTensor<f64>,
    block: &FnoBlockParams,
    plan: &DfftPlan,
    activation: Activation,
) -> Result<(DistTensor<f64>, BlockSaved)> {
    let (w_path, affine_saved) = affine_pointwise(ctx, x, &block.channel, 1)?;
    let (s_path, spectral_saved) = spectral_conv(ctx, x, &block.spectral, plan)?;
    let mut sum = w_path.add_elementwise(&s_path)?;
    let relu_mask = match activation {
        Activation::Relu => {
            let mask: Vec<bool> = sum.local().iter().map(|&v| v > 0.0).collect();
            for (v, &keep) in sum.local_mut().iter_mut().zip(&mask) {
                if !keep {
                    *v = 0.0;
                }
            }
            Some(mask)
        }
        Activation::Identity => None,
    };
    Ok((
        sum,
        BlockSaved { affine: affine_saved, spectral: spectral_saved, relu_mask },
    ))
}

/// Adjoint of [`fno_block`].
#[allow(clippy::type_complexity)]
pub fn fno_block_backward(
    ctx: &mut WorkerContext,
    block: &FnoBlockParams,
    plan: &DfftPlan,
    saved: &BlockSaved,
    gy: &DistTensor<f64>,
) -> Result<(DistTensor<f64>, Option<(Vec<f64>, Vec<f64>)>, Vec<Vec<Complex64>>)> {
    let mut g = gy.clone();
    if let Some(mask) = &saved.relu_mask {
        for (v, &keep) in g.local_mut().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    let (gx_affine, w_grads) = affine_backward(ctx, &saved.affine, &g)?;
    let (gx_spectral, r_grads) = spectral_conv_backward(ctx, &block.spectral, plan, &saved.spectral, &g)?;
    let gx = gx_affine.add_elementwise(&gx_spectral)?;
    Ok((gx, w_grads, r_grads))
}
