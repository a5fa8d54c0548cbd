//! Single-worker reference network: the same mathematics with whole tensors
//! and no partition machinery. Used as the oracle for the distributed path.
//!
//! Initialization shares the parameter-drawing routines, so a dense model and
//! a gathered distributed model with the same seed hold bitwise-identical
//! weights; everything after that is an independent, sequential code path.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft::{local_fft, Direction};
use crate::tensor::{strides, volume};

use super::config::{Activation, FnoConfig};
use super::params::{draw_affine, mode_is_live, mode_matrix, unfold_mode, AffineParams};

/// Plain row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if data.len() != volume(&shape) {
            return Err(Error::invalid("dense tensor data does not match its shape"));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = volume(&shape);
        DenseTensor { shape, data: vec![0.0; n] }
    }
}

/// One block's dense parameters: the channel weight plus the retained-mode
/// weight tensor laid out `[retained..., out, in]` row-major.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub channel: AffineParams,
    pub spectral: Vec<Complex64>,
}

/// The whole model with every parameter materialized.
#[derive(Debug, Clone)]
pub struct DenseModel {
    pub config: FnoConfig,
    pub modes: Vec<usize>,
    pub retained: Vec<usize>,
    pub time_affine: AffineParams,
    pub channel_affine: AffineParams,
    pub blocks: Vec<DenseBlock>,
    pub projection: AffineParams,
}

impl DenseModel {
    /// Draw the same parameters the distributed initializer draws.
    pub fn init(config: &FnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let time_affine = draw_affine(&mut rng, config.out_timesteps, 1, true);
        let channel_affine = draw_affine(&mut rng, w, config.in_channels, true);
        let block_affines: Vec<AffineParams> =
            (0..config.num_blocks).map(|_| draw_affine(&mut rng, w, w, false)).collect();
        let projection = draw_affine(&mut rng, config.out_channels, w, false);

        let modes = config.resolved_modes();
        let sizes = config.transform_sizes();
        let retained: Vec<usize> = modes.iter().zip(&sizes).map(|(&m, &n)| (2 * m).min(n)).collect();
        let r_total: usize = retained.iter().product();
        let unfold_lin = |lin: usize| -> Vec<usize> {
            let mut rem = lin;
            let mut global = vec![0usize; retained.len()];
            for j in (0..retained.len()).rev() {
                global[j] = unfold_mode(sizes[j], modes[j], rem % retained[j]);
                rem /= retained[j];
            }
            global
        };
        let blocks = block_affines
            .into_iter()
            .enumerate()
            .map(|(k, channel)| {
                let mut spectral = Vec::with_capacity(r_total * w * w);
                for lin in 0..r_total {
                    let global = unfold_lin(lin);
                    let (mat, _) = mode_matrix(seed, k, &modes, &sizes, &retained, &global, w, w);
                    spectral.extend(mat);
                }
                DenseBlock { channel, spectral }
            })
            .collect();

        Ok(DenseModel {
            config: config.clone(),
            modes,
            retained,
            time_affine,
            channel_affine,
            blocks,
            projection,
        })
    }
}

fn dense_affine(x: &DenseTensor, params: &AffineParams, dim: usize) -> Result<DenseTensor> {
    if x.shape[dim] != params.in_dim {
        return Err(Error::invalid("dense affine: extent mismatch"));
    }
    let inner: usize = x.shape[dim + 1..].iter().product();
    let outer: usize = x.shape[..dim].iter().product();
    let mut shape = x.shape.clone();
    shape[dim] = params.out_dim;
    let mut y = vec![0.0; outer * params.out_dim * inner];
    for o in 0..outer {
        for i in 0..inner {
            for oc in 0..params.out_dim {
                let mut acc = params.bias.as_ref().map_or(0.0, |b| b[oc]);
                for ic in 0..params.in_dim {
                    acc += params.weight[oc * params.in_dim + ic] * x.data[(o * params.in_dim + ic) * inner + i];
                }
                y[(o * params.out_dim + oc) * inner + i] = acc;
            }
        }
    }
    DenseTensor::new(shape, y)
}

fn dense_affine_backward(
    x: &DenseTensor,
    params: &AffineParams,
    dim: usize,
    gy: &DenseTensor,
) -> (DenseTensor, Vec<f64>, Vec<f64>) {
    let inner: usize = x.shape[dim + 1..].iter().product();
    let outer: usize = x.shape[..dim].iter().product();
    let (out_dim, in_dim) = (params.out_dim, params.in_dim);
    let mut gw = vec![0.0; out_dim * in_dim];
    let mut gb = vec![0.0; if params.bias.is_some() { out_dim } else { 0 }];
    let mut gx = vec![0.0; x.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            for oc in 0..out_dim {
                let g = gy.data[(o * out_dim + oc) * inner + i];
                if params.bias.is_some() {
                    gb[oc] += g;
                }
                for ic in 0..in_dim {
                    let xi = x.data[(o * in_dim + ic) * inner + i];
                    gw[oc * in_dim + ic] += g * xi;
                    gx[(o * in_dim + ic) * inner + i] += params.weight[oc * in_dim + ic] * g;
                }
            }
        }
    }
    (DenseTensor { shape: x.shape.clone(), data: gx }, gw, gb)
}

struct DenseSpectralCtx<'a> {
    model: &'a DenseModel,
    transform_dims: Vec<usize>,
    sizes: Vec<usize>,
}

impl<'a> DenseSpectralCtx<'a> {
    fn new(model: &'a DenseModel) -> Self {
        DenseSpectralCtx {
            transform_dims: model.config.transform_dims(),
            sizes: model.config.transform_sizes(),
            model,
        }
    }

    /// Visit every retained mode: (linear retained index, frequency offset of
    /// the mode within a per-channel spectrum, global frequency multi-index).
    fn for_each_mode(&self, shape: &[usize], mut f: impl FnMut(usize, usize, &[usize])) {
        let st = strides(shape);
        let r_total: usize = self.model.retained.iter().product();
        let mut global = vec![0usize; self.model.retained.len()];
        for lin in 0..r_total {
            let mut rem = lin;
            let mut offset = 0usize;
            for j in (0..self.model.retained.len()).rev() {
                let folded = rem % self.model.retained[j];
                rem /= self.model.retained[j];
                let g = unfold_mode(self.sizes[j], self.model.modes[j], folded);
                global[j] = g;
                offset += g * st[self.transform_dims[j]];
            }
            f(lin, offset, &global);
        }
    }
}

fn dense_spectral_conv(
    model: &DenseModel,
    block: &DenseBlock,
    x: &DenseTensor,
) -> Result<(DenseTensor, Vec<Complex64>)> {
    let w = model.config.width;
    let shape = &x.shape;
    let cs = strides(shape)[1];
    let batch = shape[0];
    let bstride = strides(shape)[0];
    let dims = model.config.transform_dims();

    let mut spec: Vec<Complex64> = x.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    local_fft(&mut spec, shape, &dims, Direction::Forward)?;

    let ctx = DenseSpectralCtx::new(model);
    let mut out = vec![Complex64::new(0.0, 0.0); spec.len()];
    ctx.for_each_mode(shape, |lin, offset, _| {
        let mat = &block.spectral[lin * w * w..(lin + 1) * w * w];
        for b in 0..batch {
            let p = b * bstride + offset;
            for oc in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for ic in 0..w {
                    acc += mat[oc * w + ic] * spec[p + ic * cs];
                }
                out[p + oc * cs] = acc;
            }
        }
    });

    local_fft(&mut out, shape, &dims, Direction::Inverse)?;
    let im2: f64 = out.iter().map(|z| z.im * z.im).sum();
    let tot: f64 = out.iter().map(|z| z.norm_sqr()).sum();
    if tot > 0.0 && (im2 / tot).sqrt() > 1e-8 {
        return Err(Error::InvalidState("imaginary residue exceeds 1e-8".into()));
    }
    Ok((
        DenseTensor { shape: shape.clone(), data: out.iter().map(|z| z.re).collect() },
        spec,
    ))
}

fn dense_spectral_backward(
    model: &DenseModel,
    block: &DenseBlock,
    saved_spec: &[Complex64],
    shape: &[usize],
    gy: &DenseTensor,
) -> Result<(DenseTensor, Vec<Complex64>)> {
    let w = model.config.width;
    let cs = strides(shape)[1];
    let batch = shape[0];
    let bstride = strides(shape)[0];
    let dims = model.config.transform_dims();

    let mut gspec: Vec<Complex64> = gy.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    local_fft(&mut gspec, shape, &dims, Direction::Forward)?;

    let ctx = DenseSpectralCtx::new(model);
    let mut gmat = vec![Complex64::new(0.0, 0.0); block.spectral.len()];
    let mut gx_spec = vec![Complex64::new(0.0, 0.0); gspec.len()];
    let (modes, sizes) = (model.modes.clone(), model.config.transform_sizes());
    ctx.for_each_mode(shape, |lin, offset, global| {
        // inert modes carry no parameters; their (zero) matrices still route
        // nothing into the input gradient
        if !mode_is_live(&modes, &sizes, global) {
            return;
        }
        let mat = &block.spectral[lin * w * w..(lin + 1) * w * w];
        let gm = &mut gmat[lin * w * w..(lin + 1) * w * w];
        for b in 0..batch {
            let p = b * bstride + offset;
            for oc in 0..w {
                let g = gspec[p + oc * cs];
                for ic in 0..w {
                    gm[oc * w + ic] += g * saved_spec[p + ic * cs].conj();
                    gx_spec[p + ic * cs] += mat[oc * w + ic].conj() * g;
                }
            }
        }
    });

    local_fft(&mut gx_spec, shape, &dims, Direction::Inverse)?;
    Ok((
        DenseTensor { shape: shape.to_vec(), data: gx_spec.iter().map(|z| z.re).collect() },
        gmat,
    ))
}

/// Saved forward state for [`reference_backward`].
pub struct DenseTape {
    input: DenseTensor,
    after_time: DenseTensor,
    block_inputs: Vec<DenseTensor>,
    block_specs: Vec<Vec<Complex64>>,
    relu_masks: Vec<Option<Vec<bool>>>,
    before_projection: DenseTensor,
}

/// Gradients of every dense parameter group.
pub struct DenseGrads {
    pub time_weight: Vec<f64>,
    pub time_bias: Vec<f64>,
    pub channel_weight: Vec<f64>,
    pub channel_bias: Vec<f64>,
    pub block_weights: Vec<Vec<f64>>,
    pub block_spectral: Vec<Vec<Complex64>>,
    pub projection_weight: Vec<f64>,
    pub input: DenseTensor,
}

/// Sequential forward pass over whole tensors.
pub fn reference_forward(
    model: &DenseModel,
    input: &DenseTensor,
    mut tape: Option<&mut Option<DenseTape>>,
) -> Result<DenseTensor> {
    let config = &model.config;
    if input.shape != config.input_shape() {
        return Err(Error::invalid(format!(
            "reference input shape {:?}, expected {:?}",
            input.shape,
            config.input_shape()
        )));
    }
    let time_dim = config.time_dim();
    let after_time = dense_affine(input, &model.time_affine, time_dim)?;
    let mut x = dense_affine(&after_time, &model.channel_affine, 1)?;

    let mut block_inputs = Vec::new();
    let mut block_specs = Vec::new();
    let mut relu_masks = Vec::new();
    for block in &model.blocks {
        let w_path = dense_affine(&x, &block.channel, 1)?;
        let (s_path, spec) = dense_spectral_conv(model, block, &x)?;
        let mut sum: Vec<f64> = w_path.data.iter().zip(&s_path.data).map(|(&a, &b)| a + b).collect();
        let mask = match config.activation {
            Activation::Relu => {
                let mask: Vec<bool> = sum.iter().map(|&v| v > 0.0).collect();
                for (v, &keep) in sum.iter_mut().zip(&mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                Some(mask)
            }
            Activation::Identity => None,
        };
        if tape.is_some() {
            block_inputs.push(x.clone());
            block_specs.push(spec);
            relu_masks.push(mask);
        }
        x = DenseTensor { shape: x.shape.clone(), data: sum };
    }

    let out = dense_affine(&x, &model.projection, 1)?;
    if let Some(slot) = tape.as_deref_mut() {
        *slot = Some(DenseTape {
            input: input.clone(),
            after_time,
            block_inputs,
            block_specs,
            relu_masks,
            before_projection: x,
        });
    }
    Ok(out)
}

/// Sequential reverse pass, mirroring each forward step's adjoint.
pub fn reference_backward(model: &DenseModel, tape: DenseTape, gy: &DenseTensor) -> Result<DenseGrads> {
    let (mut g, proj_w, _) = {
        let (gx, gw, gb) = dense_affine_backward(&tape.before_projection, &model.projection, 1, gy);
        (gx, gw, gb)
    };

    let k = model.blocks.len();
    let mut block_weights = vec![Vec::new(); k];
    let mut block_spectral = vec![Vec::new(); k];
    for idx in (0..k).rev() {
        if let Some(mask) = &tape.relu_masks[idx] {
            for (v, &keep) in g.data.iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        let x = &tape.block_inputs[idx];
        let (gx_w, gw, _) = dense_affine_backward(x, &model.blocks[idx].channel, 1, &g);
        let (gx_s, gmat) =
            dense_spectral_backward(model, &model.blocks[idx], &tape.block_specs[idx], &x.shape, &g)?;
        block_weights[idx] = gw;
        block_spectral[idx] = gmat;
        let mut gx = gx_w;
        for (a, &b) in gx.data.iter_mut().zip(&gx_s.data) {
            *a += b;
        }
        g = gx;
    }

    let (g, chan_w, chan_b) = dense_affine_backward(&tape.after_time, &model.channel_affine, 1, &g);
    let (g, time_w, time_b) =
        dense_affine_backward(&tape.input, &model.time_affine, model.config.time_dim(), &g);

    Ok(DenseGrads {
        time_weight: time_w,
        time_bias: time_b,
        channel_weight: chan_w,
        channel_bias: chan_b,
        block_weights,
        block_spectral,
        projection_weight: proj_w,
        input: g,
    })
}
