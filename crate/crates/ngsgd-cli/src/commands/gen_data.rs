use ngsgd::data;

use crate::manifest::{unix_ms, Manifest, Resolver};
use crate::{CliError, GenDataArgs};

pub fn run(args: &GenDataArgs) -> Result<(), CliError> {
    let start = unix_ms();
    let mut res = Resolver::new(args.config.as_deref())?;
    let classes = res.required("classes", args.classes)?;
    let dim = res.required("dim", args.dim)?;
    let samples = res.required("samples", args.samples)?;
    let separation = res.or_default("separation", args.separation, 2.0)?;
    let jobs = res.or_default("jobs", args.jobs, 1)?;
    let iters = res.or_default("iters-per-epoch", args.iters_per_epoch, 1)?;
    let seed = res.seed(args.seed)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let dataset = data::generate_synthetic(classes, dim, samples, separation, seed)?;
    let blocks = data::randomize_blocks(&dataset, jobs, iters, seed)?;
    for (i, block) in blocks.iter().enumerate() {
        data::save_block(block, &args.out_dir.join(format!("block_{i:04}.ngex")))?;
    }

    let mut man = Manifest::new("gen-data", res);
    man.push("num-blocks", blocks.len());
    man.push("start-unix-ms", start);
    man.push("end-unix-ms", unix_ms());
    man.write(&args.out_dir.join("manifest.txt"))?;
    println!("wrote {} blocks to {}", blocks.len(), args.out_dir.display());
    Ok(())
}
