//! `alkt` command line: run experiments, aggregate runs, run the selftest.
//!
//! Exit codes: 0 success, 1 runtime failure (partial artifacts are left on
//! disk), 2 invalid configuration or arguments.

use alkt::config::RunConfig;
use alkt::experiment::{read_records_csv, run_experiment, CycleRecord, RunOutput};
use alkt::selection::Strategy;
use alkt::selftest;
use alkt::Result;
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "alkt", version, about = "Active learning with knowledge-transfer uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured experiment for each strategy and repeat.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's strategy list with a single strategy.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Override all base seeds: data = s, init = s+1, strategy = s+2.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of repeats.
        #[arg(long)]
        repeat: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Force probability calibration on or off.
        #[arg(long)]
        calibrate: Option<bool>,
    },
    /// Aggregate completed run directories into compare.csv.
    Compare {
        /// Run directories (each holding records.csv + manifest.json).
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Run the fast invariant suite.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            strategy,
            seed,
            repeat,
            out,
            calibrate,
        } => cmd_run(&config, strategy, seed, repeat, out, calibrate),
        Command::Compare { dirs, out } => cmd_compare(&dirs, &out),
        Command::Selftest => cmd_selftest(),
    }
}

fn cmd_run(
    config_path: &Path,
    strategy: Option<Strategy>,
    seed: Option<u64>,
    repeat: Option<usize>,
    out: Option<PathBuf>,
    calibrate: Option<bool>,
) -> ExitCode {
    // config stage: any failure is a usage error (exit 2)
    let cfg = match load_config(config_path, strategy, seed, repeat, out, calibrate) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute_runs(&cfg) {
        Ok(results) => {
            print_final_table(&results);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(
    path: &Path,
    strategy: Option<Strategy>,
    seed: Option<u64>,
    repeat: Option<usize>,
    out: Option<PathBuf>,
    calibrate: Option<bool>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = strategy {
        cfg.strategies = vec![s];
    }
    if let Some(s) = seed {
        cfg.seeds.data = s;
        cfg.seeds.init = s.wrapping_add(1);
        cfg.seeds.strategy = s.wrapping_add(2);
    }
    if let Some(r) = repeat {
        cfg.repeat = r;
    }
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    if let Some(c) = calibrate {
        cfg.uncertainty.calibrate = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute_runs(cfg: &RunConfig) -> Result<Vec<(Strategy, usize, RunOutput)>> {
    let mut results = Vec::new();
    for i in 0..cfg.repeat {
        // one dataset per repeat, shared by all strategies so cycle 0 aligns
        let dataset = cfg.load_dataset_for(i)?;
        for &strategy in &cfg.strategies {
            let exp = cfg.experiment_config(&dataset, i)?;
            let dir = cfg
                .out_dir
                .join(strategy.name())
                .join(format!("run_{i}"));
            let out = run_experiment(&dataset, strategy, &exp, Some(&dir))?;
            results.push((strategy, i, out));
        }
    }
    Ok(results)
}

fn print_final_table(results: &[(Strategy, usize, RunOutput)]) {
    println!("strategy,run,final_budget,test_accuracy");
    for (strategy, i, out) in results {
        if let Some(last) = out.records.last() {
            println!(
                "{},{},{},{}",
                strategy.name(),
                i,
                last.budget_fraction,
                last.test_accuracy
            );
        }
    }
}

fn cmd_compare(dirs: &[PathBuf], out: &Path) -> ExitCode {
    match build_compare(dirs, out) {
        Ok(rows) => {
            println!("wrote {} with {rows} rows", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("compare error: {e}");
            ExitCode::from(2)
        }
    }
}

fn build_compare(dirs: &[PathBuf], out: &Path) -> Result<usize> {
    if dirs.is_empty() {
        return Err(alkt::AlktError::invalid("no run directories given"));
    }
    // strategy -> budget rows per run
    let mut runs: BTreeMap<String, Vec<Vec<CycleRecord>>> = BTreeMap::new();
    let mut reference: Option<Vec<f64>> = None;
    for dir in dirs {
        let records = read_records_csv(&dir.join("records.csv"))?;
        if records.is_empty() {
            return Err(alkt::AlktError::invalid(format!(
                "{}: records.csv has no rows",
                dir.display()
            )));
        }
        let fracs: Vec<f64> = records.iter().map(|r| r.budget_fraction).collect();
        match &reference {
            None => reference = Some(fracs),
            Some(want) if *want != fracs => {
                return Err(alkt::AlktError::invalid(format!(
                    "{}: budget schedule {fracs:?} does not match {want:?}",
                    dir.display()
                )));
            }
            _ => {}
        }
        let strategy = read_manifest_strategy(dir)?;
        runs.entry(strategy).or_default().push(records);
    }
    let mut buf = String::from("strategy,budget_fraction,mean_test_accuracy,stddev_test_accuracy,runs\n");
    let mut rows = 0;
    for (strategy, per_run) in &runs {
        let cycles = per_run[0].len();
        for c in 0..cycles {
            let accs: Vec<f64> = per_run.iter().map(|r| r[c].test_accuracy).collect();
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            buf.push_str(&format!(
                "{},{},{},{},{}\n",
                strategy,
                per_run[0][c].budget_fraction,
                mean,
                var.sqrt(),
                accs.len()
            ));
            rows += 1;
        }
    }
    std::fs::write(out, buf)?;
    Ok(rows)
}

fn read_manifest_strategy(dir: &Path) -> Result<String> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    doc.get("strategy")
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| alkt::AlktError::parse(format!("{}: manifest lacks a strategy", dir.display())))
}

fn cmd_selftest() -> ExitCode {
    let results = selftest::run_all();
    let mut failed = false;
    for r in &results {
        println!(
            "{} ... {}",
            r.name,
            if r.passed { "pass" } else { "FAIL" }
        );
        if !r.passed {
            eprintln!("  {}", r.detail);
            failed = true;
        }
    }
    if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}
