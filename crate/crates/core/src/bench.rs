//! Weak-scaling benchmark: replays the scaling-study run configurations at
//! desk scale and times three phases per row — forward without saving
//! gradients (inference), forward with saving gradients (training), and
//! backpropagation.
//!
//! The spatial series doubles one spatial extent per partition doubling with
//! a fixed output-timestep count, holding the per-worker input volume
//! exactly constant. The temporal series keeps the global input fixed and
//! doubles the output timesteps with the worker count, holding the
//! per-worker output volume exactly constant.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::autodiff::{fno_backward, fno_forward, Tape};
use crate::model::config::{Activation, FnoConfig};
use crate::model::params::FnoModel;
use crate::runtime::launch;
use crate::tensor::{hashed_unit_f64, volume, DistTensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Worker counts to run; each must be a power of two up to 8.
    #[serde(default = "default_p_values")]
    pub p_values: Vec<usize>,
    /// Base spatial edge at p = 1 (each doubling extends one axis).
    #[serde(default = "default_base_extent")]
    pub base_extent: usize,
    #[serde(default = "default_base_timesteps")]
    pub base_timesteps: usize,
    #[serde(default = "default_bench_width")]
    pub width: usize,
    #[serde(default = "default_bench_blocks")]
    pub num_blocks: usize,
    /// Retained modes per transformed dimension.
    #[serde(default = "default_bench_modes")]
    pub modes_per_dim: usize,
    #[serde(default = "default_warmups")]
    pub warmups: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub out_csv: Option<String>,
}

fn default_p_values() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn default_base_extent() -> usize {
    32
}

fn default_base_timesteps() -> usize {
    20
}

fn default_bench_width() -> usize {
    8
}

fn default_bench_blocks() -> usize {
    4
}

fn default_bench_modes() -> usize {
    4
}

fn default_warmups() -> usize {
    2
}

fn default_repetitions() -> usize {
    5
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InferenceForward,
    TrainingForward,
    Backward,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::InferenceForward => "inference_forward",
            Phase::TrainingForward => "training_forward",
            Phase::Backward => "backward",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub series: Series,
    pub p: usize,
    pub partition: Vec<usize>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub phase: Phase,
    pub median_seconds: f64,
    pub per_worker_input_volume: usize,
}

/// Worker grid for `p` workers: doubles x, then y, then z.
fn partition_for(p: usize) -> Result<Vec<usize>> {
    let mut dims = vec![1usize, 1, 1, 1, 1, 1];
    let mut remaining = p;
    let mut axis = 2;
    while remaining > 1 {
        if remaining % 2 != 0 || axis > 4 {
            return Err(Error::invalid(format!(
                "bench worker count {p} must be a power of two at most 8"
            )));
        }
        dims[axis] *= 2;
        remaining /= 2;
        axis += 1;
    }
    Ok(dims)
}

/// Row of a series: the model configuration plus its global tensor shapes.
fn row_config(cfg: &BenchConfig, series: Series, p: usize) -> Result<FnoConfig> {
    let partition = partition_for(p)?;
    let e = cfg.base_extent;
    let spatial = match series {
        Series::Spatial => vec![e * partition[2], e * partition[3], e * partition[4]],
        Series::Temporal => vec![e, e, e],
    };
    let n_t = match series {
        Series::Spatial => cfg.base_timesteps,
        Series::Temporal => cfg.base_timesteps * p,
    };
    Ok(FnoConfig {
        partition,
        spatial_shape: spatial,
        in_channels: 1,
        out_channels: 1,
        out_timesteps: n_t,
        width: cfg.width,
        num_blocks: cfg.num_blocks,
        modes: vec![cfg.modes_per_dim; 4],
        activation: Activation::Relu,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Run one series row and return the three phase timings measured on the
/// root worker (median over the configured repetitions after warmups).
fn run_row(cfg: &BenchConfig, series: Series, p: usize) -> Result<Vec<BenchRecord>> {
    let model_config = row_config(cfg, series, p)?;
    model_config.validate()?;
    let input_shape = model_config.input_shape();
    let output_shape = model_config.output_shape();

    // weak-scaling bookkeeping: the scaled tensor's per-worker volume must
    // not depend on p
    let per_worker_input = volume(&input_shape) / p;
    match series {
        Series::Spatial => {
            let base: usize = volume(&row_config(cfg, series, 1)?.input_shape());
            if per_worker_input != base {
                return Err(Error::InvalidState(format!(
                    "spatial series row p={p} breaks constant per-worker input volume"
                )));
            }
        }
        Series::Temporal => {
            let base: usize = volume(&row_config(cfg, series, 1)?.output_shape());
            if volume(&output_shape) / p != base {
                return Err(Error::InvalidState(format!(
                    "temporal series row p={p} breaks constant per-worker output volume"
                )));
            }
        }
    }

    let warmups = cfg.warmups;
    let reps = cfg.repetitions.max(1);
    let timings = launch(p, |ctx| {
        let model = FnoModel::init(ctx, &model_config, 1234)?;
        let x = DistTensor::<f64>::from_fn(&model.layout.p_input, &model.layout.input_shape, ctx.rank(), |idx| {
            hashed_unit_f64(99, idx.iter().fold(0u64, |a, &i| a * 1031 + i as u64))
        })?;

        for _ in 0..warmups {
            let _ = fno_forward(ctx, &model, &x, None)?;
        }

        let mut inference = Vec::with_capacity(reps);
        let mut training = Vec::with_capacity(reps);
        let mut backward = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let _ = fno_forward(ctx, &model, &x, None)?;
            inference.push(t0.elapsed().as_secs_f64());

            let mut tape = Tape::new();
            let t1 = Instant::now();
            let y = fno_forward(ctx, &model, &x, Some(&mut tape))?;
            training.push(t1.elapsed().as_secs_f64());

            let ones = DistTensor::<f64>::from_fn(y.partition(), y.global_shape(), ctx.rank(), |_| 1.0)?;
            let t2 = Instant::now();
            let _ = fno_backward(ctx, &model, tape, &ones)?;
            backward.push(t2.elapsed().as_secs_f64());
        }
        Ok((inference, training, backward))
    })?;

    let (inference, training, backward) = timings.into_iter().next().expect("root timings");
    let mk = |phase: Phase, times: Vec<f64>| BenchRecord {
        series,
        p,
        partition: model_config.partition.clone(),
        input_shape: input_shape.clone(),
        output_shape: output_shape.clone(),
        phase,
        median_seconds: median(times),
        per_worker_input_volume: per_worker_input,
    };
    Ok(vec![
        mk(Phase::InferenceForward, inference),
        mk(Phase::TrainingForward, training),
        mk(Phase::Backward, backward),
    ])
}

/// Run both series over the configured worker counts. Worker counts above
/// `max_workers` are an error.
pub fn run_bench(cfg: &BenchConfig, max_workers: usize) -> Result<Vec<BenchRecord>> {
    for &p in &cfg.p_values {
        if p > max_workers {
            return Err(Error::invalid(format!(
                "bench requests {p} workers but only {max_workers} are available"
            )));
        }
    }
    let mut records = Vec::new();
    for series in [Series::Spatial, Series::Temporal] {
        for &p in &cfg.p_values {
            records.extend(run_row(cfg, series, p)?);
        }
    }
    if let Some(path) = &cfg.out_csv {
        std::fs::write(path, to_csv(&records))?;
    }
    Ok(records)
}

fn fmt_shape(shape: &[usize]) -> String {
    let inner: Vec<String> = shape.iter().map(|v| v.to_string()).collect();
    format!("({})", inner.join("x"))
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(
        "series,p,partition,input_shape,output_shape,phase,median_seconds,per_worker_input_volume\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            match r.series {
                Series::Spatial => "spatial",
                Series::Temporal => "temporal",
            },
            r.p,
            fmt_shape(&r.partition),
            fmt_shape(&r.input_shape),
            fmt_shape(&r.output_shape),
            r.phase.name(),
            r.median_seconds,
            r.per_worker_input_volume
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BenchConfig {
        BenchConfig {
            p_values: vec![1, 2],
            base_extent: 8,
            base_timesteps: 4,
            width: 2,
            num_blocks: 1,
            modes_per_dim: 2,
            warmups: 0,
            repetitions: 1,
            out_csv: None,
        }
    }

    #[test]
    fn rows_follow_the_scaling_table_structure() {
        let cfg = BenchConfig::default();
        assert_eq!(partition_for(1).unwrap(), vec![1, 1, 1, 1, 1, 1]);
        assert_eq!(partition_for(2).unwrap(), vec![1, 1, 2, 1, 1, 1]);
        assert_eq!(partition_for(4).unwrap(), vec![1, 1, 2, 2, 1, 1]);
        assert_eq!(partition_for(8).unwrap(), vec![1, 1, 2, 2, 2, 1]);
        assert!(partition_for(3).is_err());
        assert!(partition_for(16).is_err());

        let r1 = row_config(&cfg, Series::Spatial, 1).unwrap();
        assert_eq!(r1.input_shape(), vec![1, 1, 32, 32, 32, 1]);
        assert_eq!(r1.output_shape(), vec![1, 1, 32, 32, 32, 20]);
        let r2 = row_config(&cfg, Series::Spatial, 2).unwrap();
        assert_eq!(r2.input_shape(), vec![1, 1, 64, 32, 32, 1]);
        let r8 = row_config(&cfg, Series::Spatial, 8).unwrap();
        assert_eq!(r8.input_shape(), vec![1, 1, 64, 64, 64, 1]);

        let t8 = row_config(&cfg, Series::Temporal, 8).unwrap();
        assert_eq!(t8.input_shape(), vec![1, 1, 32, 32, 32, 1]);
        assert_eq!(t8.output_shape(), vec![1, 1, 32, 32, 32, 160]);
    }

    #[test]
    fn bench_runs_and_reports_all_phases() {
        let records = run_bench(&small_cfg(), 2).unwrap();
        // 2 series x 2 worker counts x 3 phases
        assert_eq!(records.len(), 12);
        for r in &records {
            assert!(r.median_seconds >= 0.0);
        }
        // spatial rows keep per-worker input volume constant
        let spatial: Vec<_> = records.iter().filter(|r| r.series == Series::Spatial).collect();
        let v0 = spatial[0].per_worker_input_volume;
        assert!(spatial.iter().all(|r| r.per_worker_input_volume == v0));
        // temporal rows keep per-worker output volume constant
        let temporal: Vec<_> = records.iter().filter(|r| r.series == Series::Temporal).collect();
        let out0 = volume(&temporal[0].output_shape) / temporal[0].p;
        assert!(temporal.iter().all(|r| volume(&r.output_shape) / r.p == out0));
        let csv = to_csv(&records);
        assert!(csv.starts_with("series,p,partition"));
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn insufficient_workers_is_invalid_argument() {
        let cfg = small_cfg();
        assert!(matches!(run_bench(&cfg, 1), Err(Error::InvalidArgument(_))));
    }
}
