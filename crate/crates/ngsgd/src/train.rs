//! Single-worker SGD with natural-gradient preconditioning.
//!
//! The update for each weight matrix is
//!
//! ```text
//!   W_i += alpha_t * eta * Xbar^T Ybar,
//! ```
//!
//! where `X` is the matrix of objective derivatives at the layer's output,
//! `Y` the matrix of inputs the layer acted on (bias column included), and
//! the bars denote preconditioning: `X` by the output-side state, `Y` by the
//! input-side state. Gradients are summed over the minibatch, never averaged.
//!
//! `alpha_t` is the max-change guard: `||Delta||_F` never exceeds
//! `sum_i eta ||xbar_i|| ||ybar_i||` (triangle inequality over rank-one
//! terms), so scaling the step by
//! `min(1, max_change / sum_i eta ||xbar_i|| ||ybar_i||)` caps the applied
//! parameter change per minibatch. The row norms come straight from the
//! preconditioner output, which computes them as a byproduct.
//!
//! The learning rate decays exponentially in samples processed, from
//! `lr_initial` to `lr_final` over a fixed total, so the schedule is
//! invariant to minibatch size and to how work is split across workers.

use ndarray::s;

use crate::error::{NgError, Result};
use crate::linalg::{self, Mat};
use crate::ng::online::{self, OnlineNgConfig, OnlineNgState};
use crate::ng::simple::{self, SimpleNgConfig};
use crate::ng::PrecondOutput;
use crate::nnet::{backprop, forward, Network};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    Simple,
    Online,
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub num_epochs: usize,
    pub minibatch_size: usize,
    pub max_change_per_sample: f64,
    pub preconditioner: Preconditioner,
    pub ng_cfg_input: OnlineNgConfig,
    pub ng_cfg_output: OnlineNgConfig,
    pub simple_cfg: SimpleNgConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr_initial: 0.01,
            lr_final: 0.001,
            num_epochs: 10,
            minibatch_size: 512,
            max_change_per_sample: 0.075,
            preconditioner: Preconditioner::Online,
            ng_cfg_input: OnlineNgConfig { rank: 20, ..OnlineNgConfig::default() },
            ng_cfg_output: OnlineNgConfig { rank: 80, ..OnlineNgConfig::default() },
            simple_cfg: SimpleNgConfig::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(NgError::InvalidArg("learning rates must be positive".into()));
        }
        if self.lr_final > self.lr_initial {
            return Err(NgError::InvalidArg("lr_final must not exceed lr_initial".into()));
        }
        if self.minibatch_size == 0 {
            return Err(NgError::InvalidArg("minibatch size must be positive".into()));
        }
        if !(self.max_change_per_sample > 0.0) {
            return Err(NgError::InvalidArg("max change must be positive".into()));
        }
        if self.ng_cfg_input.update_period == 0 || self.ng_cfg_output.update_period == 0 {
            return Err(NgError::InvalidArg("update period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScheduleState {
    pub samples_seen: u64,
    pub total_samples: u64,
}

impl ScheduleState {
    pub fn new(total_samples: u64) -> Self {
        ScheduleState { samples_seen: 0, total_samples: total_samples.max(1) }
    }

    pub fn advance(&mut self, n: u64) {
        self.samples_seen = (self.samples_seen + n).min(self.total_samples);
    }
}

/// eta = lr_initial * (lr_final / lr_initial)^(samples_seen / total).
pub fn lr_at(sched: &ScheduleState, lr_initial: f64, lr_final: f64) -> f64 {
    let frac = sched.samples_seen as f64 / sched.total_samples as f64;
    lr_initial * (lr_final / lr_initial).powf(frac)
}

/// alpha_t = min(1, limit / sum_i eta ||x_i|| ||y_i||), 1 on an empty sum.
pub fn max_change_scale(
    eta: f64,
    row_norm_pairs: &[(f64, f64)],
    max_change_per_minibatch: f64,
) -> f64 {
    let bound_sum: f64 = row_norm_pairs.iter().map(|&(x, y)| eta * x * y).sum();
    if bound_sum <= 0.0 {
        1.0
    } else {
        (max_change_per_minibatch / bound_sum).min(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct LayerUpdateStats {
    pub alpha_scale: f64,
    /// sum_i eta ||xbar_i|| ||ybar_i||, the pre-guard change bound.
    pub bound_sum: f64,
    pub gamma_in: f64,
    pub gamma_out: f64,
}

#[derive(Debug, Clone)]
pub struct UpdateStats {
    pub layers: Vec<LayerUpdateStats>,
    /// Summed log-probability objective of the minibatch, pre-update.
    pub objective: f64,
}

/// Per-layer preconditioner state for one worker. Online states are built
/// lazily from the first minibatch each side sees.
pub enum LayerPrecond<T: Scalar> {
    None,
    Simple,
    Online { input: Option<OnlineNgState<T>>, output: Option<OnlineNgState<T>> },
}

pub struct PrecondStates<T: Scalar> {
    pub layers: Vec<LayerPrecond<T>>,
    /// Minibatches this worker has processed (drives the update policy).
    pub minibatches_seen: u64,
}

impl<T: Scalar> PrecondStates<T> {
    pub fn new(net: &Network<T>, cfg: &TrainerConfig) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|_| match cfg.preconditioner {
                Preconditioner::None => LayerPrecond::None,
                Preconditioner::Simple => LayerPrecond::Simple,
                Preconditioner::Online => LayerPrecond::Online { input: None, output: None },
            })
            .collect();
        PrecondStates { layers, minibatches_seen: 0 }
    }
}

/// Online states update on every one of the first few minibatches, then on a
/// fixed period.
fn update_due(minibatches_seen: u64, cfg: &OnlineNgConfig) -> bool {
    minibatches_seen < cfg.always_update_first as u64
        || minibatches_seen % cfg.update_period as u64 == 0
}

fn identity_output<T: Scalar>(m: &Mat<T>) -> PrecondOutput<T> {
    PrecondOutput {
        x_bar: m.clone(),
        gamma: T::one(),
        row_sq_norms: linalg::row_sq_norms_f64(m).iter().map(|&v| T::from_f64(v)).collect(),
    }
}

fn precondition_side<T: Scalar>(
    kind: &mut LayerPrecond<T>,
    side_is_input: bool,
    m: &Mat<T>,
    minibatches_seen: u64,
    cfg: &TrainerConfig,
) -> Result<PrecondOutput<T>> {
    match kind {
        LayerPrecond::None => Ok(identity_output(m)),
        LayerPrecond::Simple => {
            if m.nrows() < 2 {
                // The held-out estimate needs a second row; a short final
                // minibatch of one sample passes through unpreconditioned.
                Ok(identity_output(m))
            } else {
                simple::precondition_simple(m, &cfg.simple_cfg)
            }
        }
        LayerPrecond::Online { input, output } => {
            let (slot, ng_cfg) = if side_is_input {
                (input, &cfg.ng_cfg_input)
            } else {
                (output, &cfg.ng_cfg_output)
            };
            match slot {
                None => {
                    let state = online::init_state(m, ng_cfg)?;
                    let out = online::apply_only(&state, m)?;
                    *slot = Some(state);
                    Ok(out)
                }
                Some(state) => {
                    online::precondition_online(state, m, update_due(minibatches_seen, ng_cfg))
                }
            }
        }
    }
}

/// One minibatch step: forward, backprop, precondition each weight matrix's
/// factor pair, guard, apply. Gradients for all layers are taken at the
/// pre-step parameters.
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    features: &Mat<T>,
    labels: &[u32],
    eta: f64,
    states: &mut PrecondStates<T>,
    cfg: &TrainerConfig,
) -> Result<UpdateStats> {
    let n = features.nrows();
    let bundle = backprop(net, forward(net, features)?, labels)?;
    let limit = cfg.max_change_per_sample * n as f64;
    let mut layer_stats = Vec::with_capacity(net.layers.len());
    let m_seen = states.minibatches_seen;
    for (i, grads) in bundle.layers.iter().enumerate() {
        let out_side =
            precondition_side(&mut states.layers[i], false, &grads.x_deriv, m_seen, cfg)?;
        let in_side = precondition_side(&mut states.layers[i], true, &grads.y_in, m_seen, cfg)?;
        let pairs: Vec<(f64, f64)> = out_side
            .row_sq_norms
            .iter()
            .zip(&in_side.row_sq_norms)
            .map(|(&px, &py)| (px.as_f64().sqrt(), py.as_f64().sqrt()))
            .collect();
        let bound_sum: f64 = pairs.iter().map(|&(x, y)| eta * x * y).sum();
        let alpha = max_change_scale(eta, &pairs, limit);
        let delta = out_side.x_bar.t().dot(&in_side.x_bar);
        net.layers[i].weights.scaled_add(T::from_f64(alpha * eta), &delta);
        layer_stats.push(LayerUpdateStats {
            alpha_scale: alpha,
            bound_sum,
            gamma_in: in_side.gamma.as_f64(),
            gamma_out: out_side.gamma.as_f64(),
        });
    }
    states.minibatches_seen += 1;
    Ok(UpdateStats { layers: layer_stats, objective: bundle.objective })
}

#[derive(Debug, Clone)]
pub struct ObjectiveRecord {
    pub minibatch_index: u64,
    pub samples_seen: u64,
    pub eta: f64,
    pub objective_per_sample: f64,
}

/// Writes the objective log as CSV
/// `{minibatch_index, samples_seen, eta, objective_per_sample}`.
pub fn write_objective_log(path: &std::path::Path, records: &[ObjectiveRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["minibatch_index", "samples_seen", "eta", "objective_per_sample"])?;
    for r in records {
        w.write_record([
            r.minibatch_index.to_string(),
            r.samples_seen.to_string(),
            format!("{:.10e}", r.eta),
            format!("{:.10e}", r.objective_per_sample),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains on the first `samples_to_process` rows of `(features, labels)` in
/// order, chunked into minibatches of `cfg.minibatch_size` (the last may be
/// short). Preconditioner states start fresh; the learning-rate schedule
/// continues from `sched` and advances one count per sample.
pub fn train_one_worker<T: Scalar>(
    net: &Network<T>,
    features: &Mat<T>,
    labels: &[u32],
    cfg: &TrainerConfig,
    samples_to_process: usize,
    sched: &mut ScheduleState,
) -> Result<(Network<T>, Vec<ObjectiveRecord>)> {
    cfg.validate()?;
    if labels.len() != features.nrows() {
        return Err(NgError::DimMismatch(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.nrows()
        )));
    }
    if samples_to_process == 0 {
        return Ok((net.clone(), Vec::new()));
    }
    if features.nrows() < samples_to_process {
        return Err(NgError::InsufficientData(format!(
            "stream has {} samples, {samples_to_process} requested",
            features.nrows()
        )));
    }
    let mut net = net.clone();
    let mut states = PrecondStates::new(&net, cfg);
    let mut log = Vec::new();
    let mut offset = 0usize;
    let mut index = 0u64;
    while offset < samples_to_process {
        let n = cfg.minibatch_size.min(samples_to_process - offset);
        let x = features.slice(s![offset..offset + n, ..]).to_owned();
        let y = &labels[offset..offset + n];
        let eta = lr_at(sched, cfg.lr_initial, cfg.lr_final);
        let stats = sgd_step(&mut net, &x, y, eta, &mut states, cfg)?;
        sched.advance(n as u64);
        log.push(ObjectiveRecord {
            minibatch_index: index,
            samples_seen: sched.samples_seen,
            eta,
            objective_per_sample: stats.objective / n as f64,
        });
        offset += n;
        index += 1;
    }
    Ok((net, log))
}
