//! Data-parallel training with periodic parameter averaging.
//!
//! N workers start each outer iteration from the same model, train
//! independently on disjoint data blocks, and the resulting parameters are
//! averaged to form the next model. Averaging N times fewer effective
//! updates is compensated by running every worker at N times the configured
//! effective learning rate. On the iteration right after parameters are
//! randomly (re)initialized, averaging would mix unrelated half-formed
//! solutions, so the driver instead keeps the single model that scored best
//! on its own shard.
//!
//! Workers are simulated in-process and may run concurrently; each owns its
//! model copy, schedule, preconditioner states, and block, so results are
//! identical under any scheduling. A simulated clock advances a fixed number
//! of seconds per outer iteration for time-vs-quality comparisons across
//! preconditioner variants.

pub mod combine;

use rayon::prelude::*;
use std::collections::HashMap;
use std::path::Path;

use crate::data::blocks::{block_index, ExampleBlock};
use crate::error::{NgError, Result};
use crate::linalg::Mat;
use crate::nnet::{add_hidden_layer, mean_log_prob, save_model, Network};
use crate::scalar::Scalar;
use crate::train::{train_one_worker, Preconditioner, ScheduleState, TrainerConfig};

pub use combine::{combine_models, combined_network, CombineWeights};

/// Per-outer-iteration wall-clock cost of plain SGD at reference scale.
pub const SIM_SECONDS_PLAIN: f64 = 88.0;
/// Per-outer-iteration wall-clock cost with the online preconditioner.
pub const SIM_SECONDS_ONLINE: f64 = 93.0;
/// Per-outer-iteration wall-clock cost with the per-minibatch preconditioner.
pub const SIM_SECONDS_SIMPLE: f64 = 208.0;

pub fn sim_seconds_for(p: Preconditioner) -> f64 {
    match p {
        Preconditioner::None => SIM_SECONDS_PLAIN,
        Preconditioner::Online => SIM_SECONDS_ONLINE,
        Preconditioner::Simple => SIM_SECONDS_SIMPLE,
    }
}

#[derive(Debug, Clone)]
pub struct ParallelConfig {
    pub num_jobs: usize,
    /// Target samples processed per worker per outer iteration; drives
    /// [`blocks_per_epoch`] when planning the data partition.
    pub samples_per_iter: usize,
    pub num_epochs: usize,
    /// How many trailing per-iteration models the final combination step
    /// optimizes over.
    pub combine_last: usize,
    pub sim_seconds_per_iter: f64,
    pub seed: u64,
    /// `(outer iteration, hidden width)`: grow the model by one hidden layer
    /// right before that iteration trains; the iteration then combines by
    /// best-of-shard selection like the first one.
    pub add_layer_iters: Vec<(usize, usize)>,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        ParallelConfig {
            num_jobs: 4,
            samples_per_iter: 400_000,
            num_epochs: 10,
            combine_last: 20,
            sim_seconds_per_iter: SIM_SECONDS_ONLINE,
            seed: 0,
            add_layer_iters: Vec::new(),
        }
    }
}

impl ParallelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_jobs == 0 || self.samples_per_iter == 0 || self.num_epochs == 0 {
            return Err(NgError::InvalidArg(
                "num_jobs, samples_per_iter, and num_epochs must be positive".into(),
            ));
        }
        if self.combine_last == 0 {
            return Err(NgError::InvalidArg("combine_last must be positive".into()));
        }
        if !(self.sim_seconds_per_iter >= 0.0 && self.sim_seconds_per_iter.is_finite()) {
            return Err(NgError::InvalidArg("sim seconds must be a nonnegative real".into()));
        }
        let mut iters: Vec<usize> = self.add_layer_iters.iter().map(|&(i, _)| i).collect();
        iters.sort_unstable();
        iters.dedup();
        if iters.len() != self.add_layer_iters.len() {
            return Err(NgError::InvalidArg("duplicate add-layer iteration".into()));
        }
        if self.add_layer_iters.iter().any(|&(_, d)| d == 0) {
            return Err(NgError::InvalidArg("added layer width must be positive".into()));
        }
        Ok(())
    }
}

/// Blocks each worker consumes per epoch so one block holds roughly
/// `samples_per_iter` samples.
pub fn blocks_per_epoch(num_samples: usize, cfg: &ParallelConfig) -> usize {
    num_samples.div_ceil(cfg.num_jobs * cfg.samples_per_iter).max(1)
}

fn ensure_same_arch<T: Scalar>(a: &Network<T>, b: &Network<T>) -> Result<()> {
    let matches = a.input_dim == b.input_dim
        && a.num_classes == b.num_classes
        && a.layers.len() == b.layers.len()
        && a.layers.iter().zip(&b.layers).all(|(la, lb)| {
            la.weights.dim() == lb.weights.dim() && la.nonlinearity == lb.nonlinearity
        });
    if matches {
        Ok(())
    } else {
        Err(NgError::ArchMismatch("models have different architectures".into()))
    }
}

/// Parameter-wise arithmetic mean, accumulated in f64.
pub fn average_models<T: Scalar>(models: &[Network<T>]) -> Result<Network<T>> {
    let first = models.first().ok_or_else(|| {
        NgError::InsufficientData("no models to average".into())
    })?;
    for m in &models[1..] {
        ensure_same_arch(first, m)?;
    }
    let inv = 1.0 / models.len() as f64;
    let mut out = first.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let mut acc = layer.weights.mapv(|v| v.as_f64());
        for m in &models[1..] {
            acc.zip_mut_with(&m.layers[l].weights, |a, &b| *a += b.as_f64());
        }
        layer.weights = acc.mapv(|v| T::from_f64(v * inv));
    }
    Ok(out)
}

/// Index of the model with the highest mean log-probability on its own
/// training shard; ties go to the lowest index.
pub fn select_best_model<T: Scalar>(
    models: &[Network<T>],
    shards: &[(&Mat<T>, &[u32])],
) -> Result<usize> {
    if models.is_empty() {
        return Err(NgError::InsufficientData("no models to select from".into()));
    }
    if models.len() != shards.len() {
        return Err(NgError::DimMismatch(format!(
            "{} models but {} shards",
            models.len(),
            shards.len()
        )));
    }
    let mut best = 0usize;
    let mut best_obj = f64::NEG_INFINITY;
    for (i, (m, &(x, y))) in models.iter().zip(shards).enumerate() {
        let obj = mean_log_prob(m, x, y)?;
        if obj > best_obj {
            best = i;
            best_obj = obj;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub outer_iter: u64,
    pub epoch: u64,
    /// Samples processed so far, summed across workers.
    pub samples_total: u64,
    pub sim_time_s: f64,
    pub train_objective: f64,
    pub valid_objective: f64,
}

/// Writes the run log as CSV `{outer_iter, epoch, samples_total, sim_time_s,
/// avg_model_train_objective, avg_model_valid_objective}`.
pub fn write_run_log(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "outer_iter",
        "epoch",
        "samples_total",
        "sim_time_s",
        "avg_model_train_objective",
        "avg_model_valid_objective",
    ])?;
    for r in records {
        w.write_record([
            r.outer_iter.to_string(),
            r.epoch.to_string(),
            r.samples_total.to_string(),
            format!("{:.10e}", r.sim_time_s),
            format!("{:.10e}", r.train_objective),
            format!("{:.10e}", r.valid_objective),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ParallelRunResult<T: Scalar> {
    /// The combined model after each outer iteration.
    pub models: Vec<Network<T>>,
    pub log: Vec<RunRecord>,
}

fn worker_config(tcfg: &TrainerConfig, num_jobs: usize) -> TrainerConfig {
    TrainerConfig {
        lr_initial: tcfg.lr_initial * num_jobs as f64,
        lr_final: tcfg.lr_final * num_jobs as f64,
        ..tcfg.clone()
    }
}

/// Runs the full outer loop over pre-randomized blocks (worker `n` takes
/// block `m * num_jobs + n` at within-epoch iteration `m`, the same blocks
/// every epoch). Objectives are evaluated on `eval_train` and, when given,
/// `eval_valid` (NaN otherwise); per-iteration models are checkpointed into
/// `checkpoint_dir` as `model_{iter:04}.ngnn` when given.
pub fn run_parallel_training<T: Scalar>(
    initial: &Network<T>,
    blocks: &[ExampleBlock],
    pcfg: &ParallelConfig,
    tcfg: &TrainerConfig,
    eval_train: (&Mat<T>, &[u32]),
    eval_valid: Option<(&Mat<T>, &[u32])>,
    checkpoint_dir: Option<&Path>,
) -> Result<ParallelRunResult<T>> {
    pcfg.validate()?;
    tcfg.validate()?;
    initial.validate()?;
    let n_jobs = pcfg.num_jobs;
    if blocks.len() < n_jobs {
        return Err(NgError::InsufficientData(format!(
            "{} blocks for {n_jobs} workers",
            blocks.len()
        )));
    }
    if blocks.len() % n_jobs != 0 {
        return Err(NgError::InvalidArg(format!(
            "{} blocks do not split evenly over {n_jobs} workers",
            blocks.len()
        )));
    }
    let m_per_epoch = blocks.len() / n_jobs;
    let total_iters = pcfg.num_epochs * m_per_epoch;
    let growth: HashMap<usize, usize> = pcfg.add_layer_iters.iter().copied().collect();
    if let Some(&(bad, _)) = pcfg.add_layer_iters.iter().find(|&&(i, _)| i >= total_iters) {
        return Err(NgError::InvalidArg(format!(
            "add-layer iteration {bad} beyond the run's {total_iters} iterations"
        )));
    }
    let shards: Vec<Vec<(Mat<T>, Vec<u32>)>> = (0..n_jobs)
        .map(|n| {
            (0..m_per_epoch)
                .map(|m| blocks[block_index(n, m, n_jobs)].decode::<T>())
                .collect()
        })
        .collect();
    if shards[0][0].0.ncols() != initial.input_dim {
        return Err(NgError::DimMismatch(format!(
            "blocks have {} features, model expects {}",
            shards[0][0].0.ncols(),
            initial.input_dim
        )));
    }
    let wcfg = worker_config(tcfg, n_jobs);
    let mut scheds: Vec<ScheduleState> = shards
        .iter()
        .map(|per_worker| {
            let per_epoch: usize = per_worker.iter().map(|(x, _)| x.nrows()).sum();
            ScheduleState::new((pcfg.num_epochs * per_epoch) as u64)
        })
        .collect();
    let mut current = initial.clone();
    let mut models = Vec::with_capacity(total_iters);
    let mut log = Vec::with_capacity(total_iters);
    let mut samples_total = 0u64;
    let mut sim_time_s = 0.0f64;
    for outer in 0..total_iters {
        let m = outer % m_per_epoch;
        let mut select = outer == 0;
        if let Some(&dim) = growth.get(&outer) {
            current = add_hidden_layer(&current, dim, pcfg.seed.wrapping_add(outer as u64))?;
            select = true;
        }
        let trained: Vec<Network<T>> = scheds
            .par_iter_mut()
            .enumerate()
            .map(|(n, sched)| {
                let (x, y) = &shards[n][m];
                train_one_worker(&current, x, y, &wcfg, x.nrows(), sched)
                    .map(|(net, _)| net)
            })
            .collect::<Result<Vec<_>>>()?;
        samples_total += shards.iter().map(|s| s[m].0.nrows() as u64).sum::<u64>();
        current = if select {
            let iter_shards: Vec<(&Mat<T>, &[u32])> = shards
                .iter()
                .map(|s| (&s[m].0, s[m].1.as_slice()))
                .collect();
            trained[select_best_model(&trained, &iter_shards)?].clone()
        } else {
            average_models(&trained)?
        };
        sim_time_s += pcfg.sim_seconds_per_iter;
        let train_objective = mean_log_prob(&current, eval_train.0, eval_train.1)?;
        let valid_objective = match eval_valid {
            Some((x, y)) => mean_log_prob(&current, x, y)?,
            None => f64::NAN,
        };
        if let Some(dir) = checkpoint_dir {
            save_model(&current, &dir.join(format!("model_{outer:04}.ngnn")))?;
        }
        log.push(RunRecord {
            outer_iter: outer as u64,
            epoch: (outer / m_per_epoch) as u64,
            samples_total,
            sim_time_s,
            train_objective,
            valid_objective,
        });
        models.push(current.clone());
    }
    Ok(ParallelRunResult { models, log })
}
