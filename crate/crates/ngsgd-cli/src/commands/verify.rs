use ngsgd::verify::{run_battery, Suite, VerifyOptions};

use crate::manifest::{unix_ms, Manifest, Resolver};
use crate::{CliError, VerifyArgs};

fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<u64>()
                .map_err(|e| CliError::Usage(format!("bad seed {tok:?}: {e}")))
        })
        .collect()
}

pub fn run(args: &VerifyArgs) -> Result<(), CliError> {
    let start = unix_ms();
    let suites: Vec<Suite> = match &args.suite {
        None => Suite::ALL.to_vec(),
        Some(name) => vec![Suite::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
            CliError::Usage(format!("unknown suite {name:?}; expected one of {}", known.join(", ")))
        })?],
    };
    let seeds = match &args.seeds {
        Some(s) => parse_seeds(s)?,
        None => (0..10).collect(),
    };
    let opts = VerifyOptions { seeds: seeds.clone(), inject_fault: args.inject_fault };
    let reports = run_battery(&suites, &opts)?;

    let mut all_passed = true;
    let mut lines = Vec::with_capacity(reports.len());
    for r in &reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        let line = format!(
            "{}: {} cases, max rel err {:.3e} (tolerance {:.1e}) ... {verdict}",
            r.suite, r.cases, r.max_error, r.tolerance
        );
        println!("{line}");
        lines.push(line);
        all_passed &= r.passed();
    }

    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut res = Resolver::new(None)?;
        let seed_list = seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        res.or_default("seeds", Some(seed_list.clone()), seed_list)?;
        let mut man = Manifest::new("verify", res);
        if let Some(name) = &args.suite {
            man.push("suite", name);
        }
        man.push("inject-fault", args.inject_fault);
        for r in &reports {
            man.push(&format!("max-err-{}", r.suite), format!("{:.6e}", r.max_error));
        }
        man.push("all-passed", all_passed);
        man.push("start-unix-ms", start);
        man.push("end-unix-ms", unix_ms());
        man.write(&dir.join("manifest.txt"))?;
    }

    if all_passed {
        Ok(())
    } else {
        Err(CliError::Runtime("verification failed".into()))
    }
}
