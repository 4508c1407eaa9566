use ngsgd::nnet::{self, Nonlinearity};
use ngsgd::train::{train_one_worker, ObjectiveRecord, ScheduleState};
use ngsgd::Mat;

use super::{load_block_dir, network_dims, parse_hidden_dims, resolve_trainer};
use crate::manifest::{unix_ms, Manifest, Resolver};
use crate::{CliError, TrainArgs};

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let start = unix_ms();
    let mut res = Resolver::new(args.config.as_deref())?;
    let data_dir = res.required_path("data-dir", args.train.data_dir.clone())?;
    let hidden = parse_hidden_dims(&res.or_default(
        "hidden-dims",
        args.train.hidden_dims.clone(),
        "128,128".to_string(),
    )?)?;
    let cfg = resolve_trainer(&mut res, &args.train)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let blocks = load_block_dir(&data_dir)?;
    let classes = blocks[0].num_classes as usize;
    let input_dim = blocks[0].feature_dim();
    let decoded: Vec<(Mat<f32>, Vec<u32>)> = blocks.iter().map(|b| b.decode()).collect();
    let total_samples: u64 = decoded.iter().map(|(x, _)| x.nrows() as u64).sum();

    let dims = network_dims(input_dim, &hidden, classes);
    let mut net = nnet::init_network::<f32>(&dims, &Nonlinearity::Relu, cfg.seed)?;
    let mut sched = ScheduleState::new(cfg.num_epochs as u64 * total_samples);
    let mut records: Vec<ObjectiveRecord> = Vec::new();
    for _ in 0..cfg.num_epochs {
        for (x, labels) in &decoded {
            let (next, recs) = train_one_worker(&net, x, labels, &cfg, x.nrows(), &mut sched)?;
            net = next;
            let offset = records.len() as u64;
            records.extend(recs.into_iter().map(|mut r| {
                r.minibatch_index += offset;
                r
            }));
        }
    }

    let model_path = args.out_dir.join("model.ngnn");
    let log_path = args.out_dir.join("objective.csv");
    nnet::save_model(&net, &model_path)?;
    ngsgd::train::write_objective_log(&log_path, &records)?;

    let mut man = Manifest::new("train", res);
    man.push("num-samples", total_samples);
    man.push("objective-log", log_path.display());
    man.push("final-model", model_path.display());
    man.push("start-unix-ms", start);
    man.push("end-unix-ms", unix_ms());
    man.write(&args.out_dir.join("manifest.txt"))?;

    let last = records.last().map(|r| r.objective_per_sample).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs over {} samples, final objective {:.6} nats/sample, model at {}",
        cfg.num_epochs,
        total_samples,
        last,
        model_path.display()
    );
    Ok(())
}
