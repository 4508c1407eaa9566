use std::path::PathBuf;

use ngsgd::nnet::{self, Network};
use ngsgd::parallel::combine_models;

use super::{concat_blocks, load_block_dir};
use crate::manifest::{unix_ms, Manifest, Resolver};
use crate::{CliError, CombineArgs};

fn checkpoints_from_dir(dir: &PathBuf, last: usize) -> Result<Vec<PathBuf>, CliError> {
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(idx) = name
            .strip_prefix("model_")
            .and_then(|rest| rest.strip_suffix(".ngnn"))
            .and_then(|digits| digits.parse::<u64>().ok())
        else {
            continue;
        };
        found.push((idx, path));
    }
    if found.len() < last {
        return Err(CliError::Runtime(format!(
            "need {last} checkpoints in {}, found {}",
            dir.display(),
            found.len()
        )));
    }
    found.sort_by_key(|(idx, _)| *idx);
    Ok(found.split_off(found.len() - last).into_iter().map(|(_, p)| p).collect())
}

pub fn run(args: &CombineArgs) -> Result<(), CliError> {
    let start = unix_ms();
    let mut res = Resolver::new(args.config.as_deref())?;

    let model_paths: Vec<PathBuf> = if !args.models.is_empty() {
        args.models.clone()
    } else {
        let dir = res.required_path("checkpoint-dir", args.checkpoint_dir.clone())?;
        let last = res.or_default("combine-last", args.combine_last, 20)?;
        checkpoints_from_dir(&dir, last)?
    };
    for p in &model_paths {
        if !p.is_file() {
            return Err(CliError::Runtime(format!("missing checkpoint {}", p.display())));
        }
    }
    let models: Vec<Network<f32>> = model_paths
        .iter()
        .map(|p| nnet::load_model(p).map_err(CliError::from))
        .collect::<Result<_, _>>()?;

    let tune_blocks = if !args.tune_blocks.is_empty() {
        args.tune_blocks
            .iter()
            .map(|p| ngsgd::data::load_block(p).map_err(CliError::from))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let dir = res.required_path("tune-dir", args.tune_dir.clone())?;
        load_block_dir(&dir)?
    };
    let (tune_x, tune_labels) = concat_blocks::<f32>(&tune_blocks)?;

    let before: Vec<f64> = models
        .iter()
        .map(|m| nnet::mean_log_prob(m, &tune_x, &tune_labels))
        .collect::<Result<_, _>>()?;
    let best_before = before.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (combined, weights) = combine_models(&models, &tune_x, &tune_labels)?;
    let after = nnet::mean_log_prob(&combined, &tune_x, &tune_labels)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let model_path = args.out_dir.join("combined.ngnn");
    nnet::save_model(&combined, &model_path)?;

    for (path, obj) in model_paths.iter().zip(&before) {
        println!("input {}: tune objective {obj:.6}", path.display());
    }
    println!("combined ({} models, {} layers): tune objective {after:.6}", weights.weights.nrows(), weights.weights.ncols());

    let joined = model_paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut man = Manifest::new("combine", res);
    man.push("models", joined);
    man.push("num-tune-samples", tune_x.nrows());
    man.push("tune-objective-best-single", format!("{best_before:.10e}"));
    man.push("tune-objective-combined", format!("{after:.10e}"));
    man.push("final-model", model_path.display());
    man.push("start-unix-ms", start);
    man.push("end-unix-ms", unix_ms());
    man.write(&args.out_dir.join("manifest.txt"))?;
    Ok(())
}
