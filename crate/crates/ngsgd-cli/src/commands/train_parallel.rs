use ngsgd::nnet::{self, Nonlinearity};
use ngsgd::parallel::{run_parallel_training, sim_seconds_for, write_run_log, ParallelConfig};
use ngsgd::Mat;

use super::{concat_blocks, load_block_dir, network_dims, parse_hidden_dims, resolve_trainer};
use crate::manifest::{unix_ms, Manifest, Resolver};
use crate::{CliError, TrainParallelArgs};

/// Samples of training data the run log objective is evaluated on.
const EVAL_SUBSET: usize = 20_000;

pub fn run(args: &TrainParallelArgs) -> Result<(), CliError> {
    let start = unix_ms();
    let mut res = Resolver::new(args.config.as_deref())?;
    let data_dir = res.required_path("data-dir", args.train.data_dir.clone())?;
    let hidden = parse_hidden_dims(&res.or_default(
        "hidden-dims",
        args.train.hidden_dims.clone(),
        "128,128".to_string(),
    )?)?;
    let cfg = resolve_trainer(&mut res, &args.train)?;
    let jobs = res.or_default("jobs", args.jobs, 4)?;
    let combine_last = res.or_default("combine-last", args.combine_last, 20)?;
    let sim_seconds = res.or_default(
        "sim-seconds-per-iter",
        args.sim_seconds_per_iter,
        sim_seconds_for(cfg.preconditioner),
    )?;
    let valid_dir = res.optional_path("valid-dir", args.valid_dir.clone());

    std::fs::create_dir_all(&args.out_dir)?;
    let blocks = load_block_dir(&data_dir)?;
    let classes = blocks[0].num_classes as usize;
    let input_dim = blocks[0].feature_dim();
    let total_samples: usize = blocks.iter().map(|b| b.num_examples()).sum();
    if jobs == 0 || blocks.len() % jobs != 0 {
        return Err(CliError::Usage(format!(
            "{} blocks cannot be split across {jobs} workers",
            blocks.len()
        )));
    }
    let blocks_per_epoch = blocks.len() / jobs;

    let (train_x, train_labels) = concat_blocks::<f32>(&blocks)?;
    let eval_n = train_x.nrows().min(EVAL_SUBSET);
    let eval_x = train_x.slice(ndarray::s![..eval_n, ..]).to_owned();
    let eval_labels = &train_labels[..eval_n];

    let valid: Option<(Mat<f32>, Vec<u32>)> = match &valid_dir {
        Some(dir) => Some(concat_blocks(&load_block_dir(dir)?)?),
        None => None,
    };

    let pcfg = ParallelConfig {
        num_jobs: jobs,
        samples_per_iter: total_samples.div_ceil(blocks.len()),
        num_epochs: cfg.num_epochs,
        combine_last,
        sim_seconds_per_iter: sim_seconds,
        seed: cfg.seed,
        add_layer_iters: Vec::new(),
    };

    let dims = network_dims(input_dim, &hidden, classes);
    let initial = nnet::init_network::<f32>(&dims, &Nonlinearity::Relu, cfg.seed)?;
    let result = run_parallel_training(
        &initial,
        &blocks,
        &pcfg,
        &cfg,
        (&eval_x, eval_labels),
        valid.as_ref().map(|(x, l)| (x, l.as_slice())),
        Some(&args.out_dir),
    )?;

    let model_path = args.out_dir.join("model.ngnn");
    let log_path = args.out_dir.join("run_log.csv");
    let final_model = result.models.last().ok_or_else(|| {
        CliError::Runtime("training produced no iterations".into())
    })?;
    nnet::save_model(final_model, &model_path)?;
    write_run_log(&log_path, &result.log)?;

    let mut man = Manifest::new("train-parallel", res);
    man.push("num-blocks", blocks.len());
    man.push("blocks-per-epoch", blocks_per_epoch);
    man.push("num-samples", total_samples);
    man.push("worker-lr-initial", cfg.lr_initial * jobs as f64);
    man.push("worker-lr-final", cfg.lr_final * jobs as f64);
    man.push("run-log", log_path.display());
    man.push("final-model", model_path.display());
    man.push("start-unix-ms", start);
    man.push("end-unix-ms", unix_ms());
    man.write(&args.out_dir.join("manifest.txt"))?;

    let last = result.log.last().map(|r| r.train_objective).unwrap_or(f64::NAN);
    println!(
        "{} outer iterations across {jobs} workers, final train objective {:.6} nats/sample, model at {}",
        result.log.len(),
        last,
        model_path.display()
    );
    Ok(())
}
