//! The full network forward pass, the tape of saved state, and reverse-mode
//! gradients assembled from each layer's adjoint.

use num_complex::Complex64;

use crate::collective::repartition;
use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::runtime::WorkerContext;
use crate::tensor::DistTensor;

use super::layers::{
    affine_backward, affine_pointwise, fno_block, fno_block_backward, AffineSaved, BlockSaved,
};
use super::params::FnoModel;

#[derive(Debug)]
pub enum TapeEntry {
    Repartition { source: Partition },
    TimeAffine(AffineSaved),
    ChannelAffine(AffineSaved),
    Block { index: usize, saved: BlockSaved },
    Projection(AffineSaved),
}

/// Ordered record of the forward pass with the inputs each adjoint needs.
/// Consumed by [`fno_backward`], so a tape cannot be replayed twice.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<TapeEntry>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { entries: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn record(tape: &mut Option<&mut Tape>, entry: TapeEntry) {
        if let Some(t) = tape {
            t.entries.push(entry);
        }
    }
}

/// Per-parameter gradients, mirroring [`FnoModel`]'s storage: affine
/// gradients are populated on the root worker only (empty elsewhere), while
/// spectral gradients align with this worker's shard entries.
#[derive(Debug, Clone, Default)]
pub struct ModelGrads {
    pub time_weight: Vec<f64>,
    pub time_bias: Vec<f64>,
    pub channel_weight: Vec<f64>,
    pub channel_bias: Vec<f64>,
    pub block_weights: Vec<Vec<f64>>,
    pub block_spectral: Vec<Vec<Vec<Complex64>>>,
    pub projection_weight: Vec<f64>,
}

fn at_stage(stage: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{stage}: {m}")),
        other => other,
    }
}

fn repartition_logged(
    ctx: &mut WorkerContext,
    x: &DistTensor<f64>,
    dest: &Partition,
    stage: &str,
    tape: &mut Option<&mut Tape>,
) -> Result<DistTensor<f64>> {
    let source = x.partition().clone();
    let out = repartition(ctx, x, dest).map_err(|e| at_stage(stage, e))?;
    if source.id() != dest.id() {
        Tape::record(tape, TapeEntry::Repartition { source });
    }
    Ok(out)
}

/// Run the network: time lift, channel lift, `K` blocks, projection, with
/// repartitions bringing each acting dimension wholly local. Returns the
/// prediction on the channel partition; when a tape is supplied every
/// adjoint input is recorded on it.
pub fn fno_forward(
    ctx: &mut WorkerContext,
    model: &FnoModel,
    input: &DistTensor<f64>,
    mut tape: Option<&mut Tape>,
) -> Result<DistTensor<f64>> {
    let layout = &model.layout;
    if input.global_shape() != layout.input_shape {
        return Err(Error::invalid(format!(
            "input: shape {:?} but the model expects {:?}",
            input.global_shape(),
            layout.input_shape
        )));
    }
    if input.partition().id() != layout.p_input.id() {
        return Err(Error::invalid("input: tensor is not on the model's input partition"));
    }
    if let Some(t) = tape.as_deref() {
        if !t.is_empty() {
            return Err(Error::InvalidState("tape already holds a recorded forward pass".into()));
        }
    }
    let time_dim = model.config.time_dim();

    let x = repartition_logged(ctx, input, &layout.p_time, "lift-time repartition", &mut tape)?;
    let (x, saved) =
        affine_pointwise(ctx, &x, &model.time_affine, time_dim).map_err(|e| at_stage("lift-time affine", e))?;
    Tape::record(&mut tape, TapeEntry::TimeAffine(saved));

    let x = repartition_logged(ctx, &x, &layout.p_channel, "lift-channel repartition", &mut tape)?;
    let (x, saved) =
        affine_pointwise(ctx, &x, &model.channel_affine, 1).map_err(|e| at_stage("lift-channel affine", e))?;
    Tape::record(&mut tape, TapeEntry::ChannelAffine(saved));

    let mut x = repartition_logged(ctx, &x, &layout.p_block, "block repartition", &mut tape)?;
    for (k, block) in model.blocks.iter().enumerate() {
        let (next, saved) = fno_block(ctx, &x, block, &layout.plan, model.config.activation)
            .map_err(|e| at_stage(&format!("block {k}"), e))?;
        Tape::record(&mut tape, TapeEntry::Block { index: k, saved });
        x = next;
    }

    let x = repartition_logged(ctx, &x, &layout.p_channel, "projection repartition", &mut tape)?;
    let (out, saved) =
        affine_pointwise(ctx, &x, &model.projection, 1).map_err(|e| at_stage("projection", e))?;
    Tape::record(&mut tape, TapeEntry::Projection(saved));
    Ok(out)
}

/// Walk the tape in reverse, applying each layer's adjoint. Returns the
/// parameter gradients and the gradient with respect to the network input
/// (on the model's input partition).
pub fn fno_backward(
    ctx: &mut WorkerContext,
    model: &FnoModel,
    tape: Tape,
    output_grad: &DistTensor<f64>,
) -> Result<(ModelGrads, DistTensor<f64>)> {
    if tape.is_empty() {
        return Err(Error::InvalidState("tape holds no recorded forward pass".into()));
    }
    let k = model.blocks.len();
    let mut grads = ModelGrads {
        block_weights: vec![Vec::new(); k],
        block_spectral: vec![Vec::new(); k],
        ..ModelGrads::default()
    };
    let mut g = output_grad.clone();
    for entry in tape.entries.into_iter().rev() {
        match entry {
            TapeEntry::Repartition { source } => {
                g = repartition(ctx, &g, &source)?;
            }
            TapeEntry::Projection(saved) => {
                let (gx, root) = affine_backward(ctx, &saved, &g)?;
                if let Some((gw, _)) = root {
                    grads.projection_weight = gw;
                }
                g = gx;
            }
            TapeEntry::Block { index, saved } => {
                let (gx, w_root, r_grads) =
                    fno_block_backward(ctx, &model.blocks[index], &model.layout.plan, &saved, &g)?;
                if let Some((gw, _)) = w_root {
                    grads.block_weights[index] = gw;
                }
                grads.block_spectral[index] = r_grads;
                g = gx;
            }
            TapeEntry::ChannelAffine(saved) => {
                let (gx, root) = affine_backward(ctx, &saved, &g)?;
                if let Some((gw, gb)) = root {
                    grads.channel_weight = gw;
                    grads.channel_bias = gb;
                }
                g = gx;
            }
            TapeEntry::TimeAffine(saved) => {
                let (gx, root) = affine_backward(ctx, &saved, &g)?;
                if let Some((gw, gb)) = root {
                    grads.time_weight = gw;
                    grads.time_bias = gb;
                }
                g = gx;
            }
        }
    }
    Ok((grads, g))
}
