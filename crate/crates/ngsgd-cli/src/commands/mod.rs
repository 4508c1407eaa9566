pub mod combine;
pub mod gen_data;
pub mod train;
pub mod train_parallel;
pub mod verify;

use std::path::{Path, PathBuf};

use ndarray::Axis;
use ngsgd::data::ExampleBlock;
use ngsgd::ng::online::OnlineNgConfig;
use ngsgd::ng::simple::SimpleNgConfig;
use ngsgd::train::{Preconditioner, TrainerConfig};
use ngsgd::{Mat, Scalar};

use crate::manifest::Resolver;
use crate::{CliError, TrainFlags};

pub fn parse_precond(s: &str) -> Result<Preconditioner, CliError> {
    match s {
        "none" => Ok(Preconditioner::None),
        "simple" => Ok(Preconditioner::Simple),
        "online" => Ok(Preconditioner::Online),
        other => Err(CliError::Usage(format!(
            "--precond must be none, simple, or online, got {other:?}"
        ))),
    }
}

pub fn parse_hidden_dims(s: &str) -> Result<Vec<usize>, CliError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .ok()
                .filter(|&d| d >= 1)
                .ok_or_else(|| CliError::Usage(format!("bad hidden dimension {tok:?}")))
        })
        .collect()
}

/// Resolves the flags shared by `train` and `train-parallel` into a trainer
/// configuration, echoing every value for the manifest.
pub fn resolve_trainer(res: &mut Resolver, f: &TrainFlags) -> Result<TrainerConfig, CliError> {
    let epochs = res.or_default("epochs", f.epochs, 10)?;
    let minibatch = res.or_default("minibatch", f.minibatch, 512)?;
    let lr_initial = res.or_default("lr-initial", f.lr_initial, 0.01)?;
    let lr_final = res.or_default("lr-final", f.lr_final, 0.001)?;
    let precond = parse_precond(&res.or_default(
        "precond",
        f.precond.clone(),
        "online".to_string(),
    )?)?;
    let rank_in = res.or_default("rank-in", f.rank_in, 20)?;
    let rank_out = res.or_default("rank-out", f.rank_out, 80)?;
    let alpha = res.or_default("alpha", f.alpha, 4.0)?;
    let s_samples = res.or_default("s-samples", f.s_samples, 2000.0)?;
    let update_period = res.or_default("update-period", f.update_period, 4)?;
    let max_change = res.or_default("max-change-per-sample", f.max_change_per_sample, 0.075)?;
    let seed = res.seed(f.seed)?;

    let online = OnlineNgConfig { alpha, s_samples, update_period, ..OnlineNgConfig::default() };
    let cfg = TrainerConfig {
        lr_initial,
        lr_final,
        num_epochs: epochs,
        minibatch_size: minibatch,
        max_change_per_sample: max_change,
        preconditioner: precond,
        ng_cfg_input: OnlineNgConfig { rank: rank_in, ..online.clone() },
        ng_cfg_output: OnlineNgConfig { rank: rank_out, ..online },
        simple_cfg: SimpleNgConfig { alpha, ..SimpleNgConfig::default() },
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads every `block_NNNN.ngex` in the directory, in index order.
pub fn load_block_dir(dir: &Path) -> Result<Vec<ExampleBlock>, CliError> {
    let mut indexed: Vec<(usize, PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(idx) = name
            .strip_prefix("block_")
            .and_then(|rest| rest.strip_suffix(".ngex"))
            .and_then(|digits| digits.parse::<usize>().ok())
        else {
            continue;
        };
        indexed.push((idx, path));
    }
    if indexed.is_empty() {
        return Err(CliError::Runtime(format!(
            "no block_NNNN.ngex files in {}",
            dir.display()
        )));
    }
    indexed.sort_by_key(|(idx, _)| *idx);
    indexed
        .into_iter()
        .map(|(_, path)| ngsgd::data::load_block(&path).map_err(CliError::from))
        .collect()
}

/// Decodes blocks into one feature matrix and label vector.
pub fn concat_blocks<T: Scalar>(blocks: &[ExampleBlock]) -> Result<(Mat<T>, Vec<u32>), CliError> {
    let mut mats = Vec::with_capacity(blocks.len());
    let mut labels = Vec::new();
    for b in blocks {
        let (x, l) = b.decode::<T>();
        mats.push(x);
        labels.extend(l);
    }
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| CliError::Runtime(format!("blocks do not stack: {e}")))?;
    Ok((x, labels))
}

pub fn network_dims(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(classes);
    dims
}
