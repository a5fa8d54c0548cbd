//! Training and inference drivers: per-worker region ingestion from chunked
//! tensor files, the epoch loop (forward, relative-L2 loss, adjoint
//! gradients, Adam), loss-history CSV output, and checkpointing.

use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::collective::repartition;
use crate::error::{Error, Result};
use crate::heat::DatasetManifest;
use crate::model::adam::{AdamParams, ModelOptimizer};
use crate::model::autodiff::{fno_backward, fno_forward, Tape};
use crate::model::config::{Activation, FnoConfig};
use crate::model::loss::{relative_l2_loss_grad, relative_lp_loss};
use crate::model::params::{
    mode_is_live, retained_linear_index, FnoModel, ModelLayout, SpectralEntry,
};
use crate::partition::{Partition, RegionBox};
use crate::runtime::{launch, reduce_sum, WorkerContext};
use crate::tensor::DistTensor;
use crate::tensorfile::{read_region, read_tensor, write_tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Worker grid over (batch, channel, x, y, time).
    pub partition: Vec<usize>,
    pub dataset_dir: String,
    pub out_dir: String,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_blocks")]
    pub num_blocks: usize,
    #[serde(default)]
    pub modes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_width() -> usize {
    20
}

fn default_blocks() -> usize {
    4
}

impl TrainConfig {
    /// Architecture resolved against the dataset manifest.
    pub fn model_config(&self, manifest: &DatasetManifest) -> FnoConfig {
        FnoConfig {
            partition: self.partition.clone(),
            spatial_shape: vec![manifest.grid, manifest.grid],
            in_channels: 1,
            out_channels: 1,
            out_timesteps: manifest.n_t,
            width: self.width,
            num_blocks: self.num_blocks,
            modes: self.modes.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

/// Strip the leading batch dimension off a worker's box to address a
/// per-sample file, whose dims omit the batch.
fn file_region(local_box: &RegionBox) -> RegionBox {
    RegionBox::new(local_box.ranges()[1..].to_vec())
}

/// Read this worker's block of a per-sample tensor file into a distributed
/// tensor on `partition` with the batch dimension prepended.
pub fn read_worker_block(
    path: impl AsRef<Path>,
    partition: &Partition,
    global_shape: &[usize],
    rank: usize,
) -> Result<DistTensor<f64>> {
    let local_box = partition.region_or_empty(rank, global_shape)?;
    let data = read_region::<f64>(path, &file_region(&local_box))?;
    DistTensor::from_local(partition, global_shape, rank, data)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: FnoConfig,
    seed: u64,
}

fn vec1(n: usize) -> Vec<usize> {
    vec![n]
}

/// Write all parameter groups as chunked tensor files plus a manifest.
/// Spectral shards are assembled into dense retained tensors on the root by
/// a fixed-order sum over the (disjointly owned) modes.
pub fn save_checkpoint(ctx: &mut WorkerContext, model: &FnoModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let root = ctx.rank() == 0;
    if root {
        std::fs::create_dir_all(dir)?;
    }
    let config = &model.config;
    let w = config.width;
    let modes = config.resolved_modes();
    let sizes = config.transform_sizes();
    let retained: Vec<usize> = modes.iter().zip(&sizes).map(|(&m, &n)| (2 * m).min(n)).collect();
    let r_total: usize = retained.iter().product();

    for (k, block) in model.blocks.iter().enumerate() {
        let mut dense = vec![Complex64::new(0.0, 0.0); r_total * w * w];
        for entry in &block.spectral.entries {
            let lin = retained_linear_index(&retained, &modes, &sizes, &entry.global) as usize;
            dense[lin * w * w..(lin + 1) * w * w].copy_from_slice(&entry.matrix);
        }
        let everyone: Vec<usize> = (0..ctx.num_workers()).collect();
        let gathered = reduce_sum(ctx, model.layout.p_input.id(), &everyone, 0, &dense)?;
        if let Some(dense) = gathered {
            let mut dims = retained.clone();
            dims.push(w);
            dims.push(w);
            let chunk = dims.clone();
            write_tensor(dir.join(format!("block{k}_spectral.dfno")), &dims, &chunk, &dense)?;
        }
    }

    if root {
        let aff = |p: &crate::model::params::AffineParams| (p.out_dim, p.in_dim);
        let (to, ti) = aff(&model.time_affine);
        write_tensor(dir.join("time_weight.dfno"), &[to, ti], &[to, ti], &model.time_affine.weight)?;
        write_tensor(dir.join("time_bias.dfno"), &vec1(to), &vec1(to), model.time_affine.bias.as_ref().unwrap())?;
        let (co, ci) = aff(&model.channel_affine);
        write_tensor(dir.join("channel_weight.dfno"), &[co, ci], &[co, ci], &model.channel_affine.weight)?;
        write_tensor(dir.join("channel_bias.dfno"), &vec1(co), &vec1(co), model.channel_affine.bias.as_ref().unwrap())?;
        for (k, block) in model.blocks.iter().enumerate() {
            let (bo, bi) = aff(&block.channel);
            write_tensor(dir.join(format!("block{k}_channel.dfno")), &[bo, bi], &[bo, bi], &block.channel.weight)?;
        }
        let (po, pi) = aff(&model.projection);
        write_tensor(dir.join("projection.dfno"), &[po, pi], &[po, pi], &model.projection.weight)?;
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            seed: model.seed,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?,
        )?;
    }
    Ok(())
}

/// Load a checkpoint onto a (possibly different) worker partition: every
/// worker reads the parameter files directly and keeps its own shard of the
/// spectral weights.
pub fn load_checkpoint(
    ctx: &WorkerContext,
    dir: impl AsRef<Path>,
    partition: &[usize],
) -> Result<FnoModel> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let mut config = manifest.config;
    config.partition = partition.to_vec();
    let layout = ModelLayout::new(&config)?;
    if layout.p_input.total_workers() != ctx.num_workers() {
        return Err(Error::invalid(format!(
            "partition uses {} workers but the runtime has {}",
            layout.p_input.total_workers(),
            ctx.num_workers()
        )));
    }
    let mut model = FnoModel::init_for_rank(&config, layout, manifest.seed, ctx.rank())?;

    let read_affine = |name: &str, out_dim: usize, in_dim: usize| -> Result<Vec<f64>> {
        let (header, data) = read_tensor::<f64>(dir.join(name))?;
        if header.dims != [out_dim, in_dim] && header.dims != [out_dim] {
            return Err(Error::invalid(format!(
                "checkpoint {name}: dims {:?} do not match the configured model",
                header.dims
            )));
        }
        Ok(data)
    };
    model.time_affine.weight = read_affine("time_weight.dfno", config.out_timesteps, 1)?;
    model.time_affine.bias = Some(read_affine("time_bias.dfno", config.out_timesteps, 0)?);
    model.channel_affine.weight = read_affine("channel_weight.dfno", config.width, config.in_channels)?;
    model.channel_affine.bias = Some(read_affine("channel_bias.dfno", config.width, 0)?);
    model.projection.weight = read_affine("projection.dfno", config.out_channels, config.width)?;

    let w = config.width;
    let modes = config.resolved_modes();
    let sizes = config.transform_sizes();
    let retained: Vec<usize> = modes.iter().zip(&sizes).map(|(&m, &n)| (2 * m).min(n)).collect();
    let r_total: usize = retained.iter().product();
    for (k, block) in model.blocks.iter_mut().enumerate() {
        let (header, dense) = read_tensor::<Complex64>(dir.join(format!("block{k}_spectral.dfno")))?;
        let mut expect = retained.clone();
        expect.push(w);
        expect.push(w);
        if header.dims != expect || dense.len() != r_total * w * w {
            return Err(Error::invalid(format!(
                "checkpoint block{k}_spectral: dims {:?} do not match the configured model",
                header.dims
            )));
        }
        block.channel.weight = read_affine(&format!("block{k}_channel.dfno"), w, w)?;
        for entry in block.spectral.entries.iter_mut() {
            let lin = retained_linear_index(&retained, &modes, &sizes, &entry.global) as usize;
            entry.matrix.copy_from_slice(&dense[lin * w * w..(lin + 1) * w * w]);
            entry.live = mode_is_live(&modes, &sizes, &entry.global);
        }
        let _ = &block.spectral.entries as &Vec<SpectralEntry>;
    }
    Ok(model)
}

/// Run the full training loop and return the per-epoch loss history. Writes
/// `losses.csv` and a `checkpoint/` directory under the config's `out_dir`.
pub fn run_training(config: &TrainConfig, workers: usize) -> Result<Vec<EpochLoss>> {
    if config.batch_size != 1 {
        return Err(Error::invalid("batch_size must be 1 (pure model parallelism)"));
    }
    if config.epochs == 0 || config.train_samples == 0 {
        return Err(Error::invalid("epochs and train_samples must be positive"));
    }
    let manifest = DatasetManifest::load(&config.dataset_dir)?;
    if config.train_samples + config.val_samples > manifest.n_samples {
        return Err(Error::invalid(format!(
            "dataset holds {} samples but the split needs {}",
            manifest.n_samples,
            config.train_samples + config.val_samples
        )));
    }
    let model_config = config.model_config(&manifest);
    model_config.validate()?;
    let declared: usize = config.partition.iter().product();
    if declared != workers {
        return Err(Error::invalid(format!(
            "partition uses {declared} workers but {workers} were requested"
        )));
    }

    let dataset_dir = Path::new(&config.dataset_dir).to_path_buf();
    let out_dir = Path::new(&config.out_dir).to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    let histories = launch(workers, |ctx| {
        train_worker(ctx, config, &model_config, &manifest, &dataset_dir, &out_dir)
    })?;

    let history = histories.into_iter().next().expect("at least one worker");
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for row in &history {
        csv.push_str(&format!("{},{},{}\n", row.epoch, row.train, row.val));
    }
    std::fs::write(out_dir.join("losses.csv"), csv)?;
    Ok(history)
}

fn train_worker(
    ctx: &mut WorkerContext,
    config: &TrainConfig,
    model_config: &FnoConfig,
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<EpochLoss>> {
    let mut model = FnoModel::init(ctx, model_config, config.seed)?;
    let mut optimizer = ModelOptimizer::new(&model, AdamParams::with_learning_rate(config.learning_rate));
    let input_shape = model.layout.input_shape.clone();
    let output_shape = model.layout.output_shape.clone();
    let p_input = model.layout.p_input.clone();
    let p_out = model.layout.p_channel.clone();

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut train_sum = 0.0;
        for s in 0..config.train_samples {
            let x = read_worker_block(manifest.input_path(dataset_dir, s), &p_input, &input_shape, ctx.rank())?;
            let target = read_worker_block(manifest.target_path(dataset_dir, s), &p_out, &output_shape, ctx.rank())?;
            let mut tape = Tape::new();
            let y = fno_forward(ctx, &model, &x, Some(&mut tape))?;
            let (loss, grad) = relative_l2_loss_grad(ctx, &y, &target)?;
            let (grads, _) = fno_backward(ctx, &model, tape, &grad)?;
            optimizer.step(ctx, &mut model, &grads)?;
            train_sum += loss;
        }
        let mut val_sum = 0.0;
        for s in config.train_samples..config.train_samples + config.val_samples {
            let x = read_worker_block(manifest.input_path(dataset_dir, s), &p_input, &input_shape, ctx.rank())?;
            let target = read_worker_block(manifest.target_path(dataset_dir, s), &p_out, &output_shape, ctx.rank())?;
            let y = fno_forward(ctx, &model, &x, None)?;
            val_sum += relative_lp_loss(ctx, &y, &target, 2.0)?;
        }
        history.push(EpochLoss {
            epoch,
            train: train_sum / config.train_samples as f64,
            val: if config.val_samples > 0 { val_sum / config.val_samples as f64 } else { f64::NAN },
        });
    }
    save_checkpoint(ctx, &model, out_dir.join("checkpoint"))?;
    Ok(history)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub partition: Vec<usize>,
    pub checkpoint_dir: String,
    pub input_path: String,
    pub output_path: String,
}

/// Load a checkpoint, run the forward pass on the input file, write the
/// prediction (without the batch dimension), and return the forward's
/// wall-clock seconds.
pub fn run_infer(config: &InferConfig, workers: usize) -> Result<f64> {
    let declared: usize = config.partition.iter().product();
    if declared != workers {
        return Err(Error::invalid(format!(
            "partition uses {declared} workers but {workers} were requested"
        )));
    }
    let times = launch(workers, |ctx| {
        let model = load_checkpoint(ctx, &config.checkpoint_dir, &config.partition)?;
        let x = read_worker_block(
            &config.input_path,
            &model.layout.p_input,
            &model.layout.input_shape,
            ctx.rank(),
        )?;
        let start = Instant::now();
        let y = fno_forward(ctx, &model, &x, None)?;
        let elapsed = start.elapsed().as_secs_f64();

        // assemble on the root and write the file once
        let singleton = Partition::new(&vec![1; y.global_shape().len()])?;
        let gathered = repartition(ctx, &y, &singleton)?;
        if ctx.rank() == 0 {
            let dims: Vec<usize> = y.global_shape()[1..].to_vec();
            let chunk: Vec<usize> = dims
                .iter()
                .enumerate()
                .map(|(d, &n)| if d == 0 { n } else { n.div_ceil(2) })
                .collect();
            write_tensor(&config.output_path, &dims, &chunk, gathered.local())?;
        }
        Ok(elapsed)
    })?;
    Ok(times[0])
}
