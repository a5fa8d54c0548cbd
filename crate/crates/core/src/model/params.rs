//! Model parameters and their placement.
//!
//! Affine weights live on the root worker as the master copy and are
//! broadcast on use. Spectral weights are sharded: each retained frequency
//! mode is owned by exactly the worker whose frequency-domain block contains
//! it, so their gradients never need communication. Initialization draws
//! every mode's matrix from a stream seeded by (seed, block, mode), which
//! makes the gathered weights identical across partition layouts.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dfft::{plan_dfft, DfftPlan};
use crate::error::{Error, Result};
use crate::partition::{spread_workers, Partition, RegionBox};
use crate::runtime::WorkerContext;

use super::config::FnoConfig;
use super::layers::mode_ownership;

/// Dense affine parameters: `weight` is `out_dim x in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub weight: Vec<f64>,
    pub out_dim: usize,
    pub in_dim: usize,
    pub bias: Option<Vec<f64>>,
}

impl AffineParams {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        AffineParams { weight, out_dim: dim, in_dim: dim, bias: Some(vec![0.0; dim]) }
    }
}

/// One owned retained mode: its frequency multi-index over the transformed
/// dimensions (global and box-relative) and the channel-mixing matrix
/// (`out_dim x in_dim`, row-major). `live` is false for retained modes whose
/// negation partner falls outside the retained set; such modes stay zero so
/// the output spectrum remains conjugate-symmetric and the inverse transform
/// lands on a real field.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEntry {
    pub global: Vec<usize>,
    pub local: Vec<usize>,
    pub matrix: Vec<Complex64>,
    pub live: bool,
}

/// This worker's shard of a block's spectral weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralWeights {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Retained mode count per transformed dimension (`m_d`).
    pub modes: Vec<usize>,
    /// Dense retained extent per transformed dimension (`min(2 m_d, n_d)`).
    pub retained: Vec<usize>,
    pub entries: Vec<SpectralEntry>,
}

impl SpectralWeights {
    pub fn parameter_count(&self) -> usize {
        self.entries.len() * self.out_dim * self.in_dim
    }
}

/// Fold a retained global frequency index into the dense retained grid.
pub fn fold_mode(n: usize, m: usize, global: usize) -> usize {
    if global < m {
        global
    } else {
        global - (n - 2 * m)
    }
}

/// Inverse of [`fold_mode`].
pub fn unfold_mode(n: usize, m: usize, folded: usize) -> usize {
    if folded < m {
        folded
    } else {
        folded + (n - 2 * m)
    }
}

/// Linear index of a retained mode inside the dense retained grid.
pub fn retained_linear_index(retained: &[usize], modes: &[usize], sizes: &[usize], global: &[usize]) -> u64 {
    let mut lin = 0u64;
    for (j, &g) in global.iter().enumerate() {
        lin = lin * retained[j] as u64 + fold_mode(sizes[j], modes[j], g) as u64;
    }
    lin
}

pub(crate) fn affine_scale(in_dim: usize) -> f64 {
    (1.0 / in_dim as f64).sqrt()
}

/// Draw an affine layer from the shared parameter stream: weights and biases
/// uniform in +-sqrt(1/in_dim).
pub(crate) fn draw_affine(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize, with_bias: bool) -> AffineParams {
    let s = affine_scale(in_dim);
    let weight = (0..out_dim * in_dim).map(|_| rng.gen::<f64>() * 2.0 * s - s).collect();
    let bias = with_bias.then(|| (0..out_dim).map(|_| rng.gen::<f64>() * 2.0 * s - s).collect());
    AffineParams { weight, out_dim, in_dim, bias }
}

/// Per-mode stream: each retained mode's matrix depends only on
/// (seed, block, linear retained index), never on the partition.
pub(crate) fn draw_mode_matrix(seed: u64, block: usize, linear: u64, out_dim: usize, in_dim: usize) -> Vec<Complex64> {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(block as u64).to_le_bytes());
    key[16..24].copy_from_slice(&linear.to_le_bytes());
    key[24..32].copy_from_slice(&0x00F0_5EED_0000_0001u64.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    let scale = 1.0 / (in_dim * out_dim) as f64;
    (0..out_dim * in_dim)
        .map(|_| {
            let re = rng.gen::<f64>() * scale;
            let im = rng.gen::<f64>() * scale;
            Complex64::new(re, im)
        })
        .collect()
}

fn in_retained(n: usize, m: usize, g: usize) -> bool {
    g < m || g >= n - m
}

/// Negation partner `-k mod n` per transformed dimension.
pub(crate) fn mode_partner(sizes: &[usize], global: &[usize]) -> Vec<usize> {
    global.iter().zip(sizes).map(|(&g, &n)| (n - g) % n).collect()
}

/// Whether a retained mode carries parameters: true exactly when its
/// negation partner is retained too.
pub(crate) fn mode_is_live(modes: &[usize], sizes: &[usize], global: &[usize]) -> bool {
    mode_partner(sizes, global)
        .iter()
        .zip(modes)
        .zip(sizes)
        .all(|((&p, &m), &n)| in_retained(n, m, p))
}

/// Initial matrix of a retained mode, constrained so that the weight tensor
/// commutes with conjugate symmetry: a paired mode and its partner hold
/// conjugate copies of one canonical draw, a self-paired mode holds a real
/// matrix, and a mode without a retained partner is zero and inert.
pub(crate) fn mode_matrix(
    seed: u64,
    block: usize,
    modes: &[usize],
    sizes: &[usize],
    retained: &[usize],
    global: &[usize],
    out_dim: usize,
    in_dim: usize,
) -> (Vec<Complex64>, bool) {
    let partner = mode_partner(sizes, global);
    let paired = partner
        .iter()
        .zip(modes)
        .zip(sizes)
        .all(|((&p, &m), &n)| in_retained(n, m, p));
    if !paired {
        return (vec![Complex64::new(0.0, 0.0); out_dim * in_dim], false);
    }
    if partner == global {
        let lin = retained_linear_index(retained, modes, sizes, global);
        let mut mat = draw_mode_matrix(seed, block, lin, out_dim, in_dim);
        for v in &mut mat {
            v.im = 0.0;
        }
        return (mat, true);
    }
    let canonical = if global <= &partner[..] { global } else { &partner };
    let lin = retained_linear_index(retained, modes, sizes, canonical);
    let mut mat = draw_mode_matrix(seed, block, lin, out_dim, in_dim);
    if canonical != global {
        for v in &mut mat {
            *v = v.conj();
        }
    }
    (mat, true)
}

/// Derived partitions and the spectral-transform plan shared by all blocks.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub input_shape: Vec<usize>,
    pub time_lifted_shape: Vec<usize>,
    pub lifted_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    /// Partition of the network input and output boundary (the config's).
    pub p_input: Partition,
    /// Whole along time, for the time affine.
    pub p_time: Partition,
    /// Whole along channel, for channel affines and the projection.
    pub p_channel: Partition,
    /// Working partition of the blocks (whole along batch and channel).
    pub p_block: Partition,
    pub plan: DfftPlan,
}

impl ModelLayout {
    pub fn new(config: &FnoConfig) -> Result<Self> {
        config.validate()?;
        let input_shape = config.input_shape();
        let time_lifted_shape = config.time_lifted_shape();
        let lifted_shape = config.lifted_shape();
        let output_shape = config.output_shape();
        let batch = config.batch_dim();
        let chan = config.channel_dim();
        let time = config.time_dim();
        let spatial = config.spatial_dims();

        let p_input = Partition::new(&config.partition)?;
        let total = p_input.total_workers();

        let p_time = if p_input.is_trivial_on(&[time]) {
            p_input.clone()
        } else {
            Partition::new(&spread_workers(total, &input_shape, &[batch, time], &spatial)?)?
        };
        let p_channel = if p_time.is_trivial_on(&[chan]) {
            p_time.clone()
        } else {
            let mut preferred = spatial.clone();
            preferred.push(time);
            Partition::new(&spread_workers(total, &time_lifted_shape, &[batch, chan], &preferred)?)?
        };
        // Blocks need batch and channel whole, which p_channel guarantees.
        let p_block = p_channel.clone();
        let plan = plan_dfft(&p_block, &lifted_shape, &config.transform_dims())?;

        Ok(ModelLayout {
            input_shape,
            time_lifted_shape,
            lifted_shape,
            output_shape,
            p_input,
            p_time,
            p_channel,
            p_block,
            plan,
        })
    }

    /// Frequency-domain block owned by `rank` after the forward transform.
    pub fn frequency_box(&self, rank: usize) -> Result<RegionBox> {
        self.plan
            .output_partition()
            .region_or_empty(rank, &self.lifted_shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnoBlockParams {
    pub channel: AffineParams,
    pub spectral: SpectralWeights,
}

/// All learned parameters plus the derived layout for one worker.
#[derive(Debug, Clone)]
pub struct FnoModel {
    pub config: FnoConfig,
    pub layout: ModelLayout,
    pub seed: u64,
    /// Time lift `1 -> out_timesteps`, with bias.
    pub time_affine: AffineParams,
    /// Channel lift `in_channels -> width`, with bias.
    pub channel_affine: AffineParams,
    pub blocks: Vec<FnoBlockParams>,
    /// Channel projection `width -> out_channels`, weight only.
    pub projection: AffineParams,
}

impl FnoModel {
    /// Initialize this worker's copy: identical affine masters everywhere
    /// (the root's is authoritative) plus the locally-owned spectral shard.
    pub fn init(ctx: &WorkerContext, config: &FnoConfig, seed: u64) -> Result<Self> {
        let layout = ModelLayout::new(config)?;
        if layout.p_input.total_workers() != ctx.num_workers() {
            return Err(Error::invalid(format!(
                "partition uses {} workers but the runtime has {}",
                layout.p_input.total_workers(),
                ctx.num_workers()
            )));
        }
        Self::init_for_rank(config, layout, seed, ctx.rank())
    }

    pub(crate) fn init_for_rank(config: &FnoConfig, layout: ModelLayout, seed: u64, rank: usize) -> Result<Self> {
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
        let freq_box = layout.frequency_box(rank)?;
        let owned = mode_ownership(&freq_box, &modes, &sizes, &config.transform_dims())?;

        let blocks = block_affines
            .into_iter()
            .enumerate()
            .map(|(k, channel)| {
                let entries = owned
                    .iter()
                    .map(|(global, local)| {
                        let (matrix, live) =
                            mode_matrix(seed, k, &modes, &sizes, &retained, global, w, w);
                        SpectralEntry {
                            global: global.clone(),
                            local: local.clone(),
                            matrix,
                            live,
                        }
                    })
                    .collect();
                FnoBlockParams {
                    channel,
                    spectral: SpectralWeights {
                        out_dim: w,
                        in_dim: w,
                        modes: modes.clone(),
                        retained: retained.clone(),
                        entries,
                    },
                }
            })
            .collect();

        Ok(FnoModel {
            config: config.clone(),
            layout,
            seed,
            time_affine,
            channel_affine,
            blocks,
            projection,
        })
    }

    /// Total parameter count of the global model (affines plus every
    /// retained mode's matrix, counting real and imaginary parts).
    pub fn global_parameter_count(config: &FnoConfig) -> usize {
        let w = config.width;
        let modes = config.resolved_modes();
        let sizes = config.transform_sizes();
        let retained_total: usize = modes.iter().zip(&sizes).map(|(&m, &n)| (2 * m).min(n)).product();
        let affines = config.out_timesteps + config.out_timesteps // time weight + bias
            + w * config.in_channels + w                          // channel weight + bias
            + config.num_blocks * w * w                           // block channel weights
            + config.out_channels * w; // projection
        affines + config.num_blocks * retained_total * w * w * 2
    }
}
