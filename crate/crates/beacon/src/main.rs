//! Experiment CLI. Exit codes: 0 success, 1 config error, 2 runtime error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use beacon::advantage::EstimatorKind;
use beacon::env::load_env_spec;
use beacon::error::Error;
use beacon::harness::{
    dump_advantages, evaluate, load_experiment_config, run_experiment, run_suite,
};
use beacon::policy::load_checkpoint;

#[derive(Parser)]
#[command(
    name = "beacon",
    version,
    about = "Milestone-anchored policy optimization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, checkpoint, and eval CSV.
    Run(RunArgs),
    /// Run every config in a directory over a seed list and aggregate.
    Suite(SuiteArgs),
    /// Evaluate a checkpoint on an environment.
    Eval(EvalArgs),
    /// Dump per-trajectory advantage traces as JSON lines.
    DumpAdv(DumpAdvArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (key=value text).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the estimator: beacon|grpo|no_traj|no_seg|random_partition|dropout=<p>.
    #[arg(long)]
    algo: Option<String>,
    /// Override gamma.
    #[arg(long)]
    gamma: Option<f64>,
    /// Override lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the iteration count.
    #[arg(long)]
    iters: Option<usize>,
    /// Output directory (defaults to the config's out_dir or "runs/<stem>").
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SuiteArgs {
    /// Directory of experiment config files (*.cfg).
    #[arg(long)]
    configs: PathBuf,
    /// Comma-separated seed list, e.g. 1,2,3.
    #[arg(long)]
    seeds: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Policy checkpoint (JSON).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment spec file.
    #[arg(long)]
    env: PathBuf,
    /// Number of evaluation episodes.
    #[arg(long)]
    episodes: usize,
    /// Evaluation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Greedy action selection instead of sampling.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args)]
struct DumpAdvArgs {
    /// Policy checkpoint (JSON).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment spec file.
    #[arg(long)]
    env: PathBuf,
    /// Number of rollout groups to sample.
    #[arg(long)]
    groups: usize,
    /// Rollouts per group.
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    /// Estimator to trace.
    #[arg(long, default_value = "beacon")]
    algo: String,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn dispatch(cli: Cli) -> beacon::Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Suite(args) => cmd_suite(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DumpAdv(args) => cmd_dump_adv(args),
    }
}

fn cmd_run(args: RunArgs) -> beacon::Result<()> {
    let mut cfg = load_experiment_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.beacon.seed = seed;
    }
    if let Some(algo) = &args.algo {
        cfg.estimator = algo.parse()?;
    }
    if let Some(gamma) = args.gamma {
        cfg.beacon.gamma = gamma;
    }
    if let Some(lambda) = args.lambda {
        cfg.beacon.lambda_weight = lambda;
    }
    if let Some(iters) = args.iters {
        cfg.iterations = iters;
    }
    cfg.validate()?;
    let out_dir = args.out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| {
        let stem = args
            .config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        PathBuf::from("runs").join(stem)
    });
    let output = run_experiment(&cfg, &out_dir)?;
    println!(
        "{} seed={} iterations={}: final success {:.4} ({} bucket), metrics in {}",
        cfg.estimator,
        cfg.beacon.seed,
        cfg.iterations,
        output.final_eval.success_rate,
        output.final_eval.bucket.name(),
        out_dir.join("metrics.csv").display()
    );
    Ok(())
}

fn cmd_suite(args: SuiteArgs) -> beacon::Result<()> {
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad seed '{s}'")))
        })
        .collect::<beacon::Result<_>>()?;
    let mut configs: Vec<PathBuf> = std::fs::read_dir(&args.configs)
        .map_err(|e| Error::io(&args.configs, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "cfg"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no .cfg files in {}",
            args.configs.display()
        )));
    }
    let rows = run_suite(&configs, &seeds, &args.out)?;
    for row in &rows {
        println!("{}", row.to_csv_line());
    }
    println!(
        "suite table written to {}",
        args.out.join("suite.csv").display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> beacon::Result<()> {
    let (policy, meta) = load_checkpoint::<f64>(&args.checkpoint)?;
    let spec = load_env_spec(&args.env)?;
    let report = evaluate(&policy, &spec, args.episodes, args.seed, 0, args.greedy)?;
    println!(
        "checkpoint iteration {} (seed {}): success {:.4} over {} episodes ({} bucket)",
        meta.iteration,
        meta.seed,
        report.success_rate,
        report.episodes,
        report.bucket.name()
    );
    Ok(())
}

fn cmd_dump_adv(args: DumpAdvArgs) -> beacon::Result<()> {
    let (policy, _) = load_checkpoint::<f64>(&args.checkpoint)?;
    let spec = load_env_spec(&args.env)?;
    let kind: EstimatorKind = args.algo.parse()?;
    let beacon_cfg = beacon::BeaconConfig64 {
        group_size: args.group_size,
        max_horizon: spec.max_horizon,
        ..Default::default()
    };
    match args.out {
        Some(path) => {
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut writer = std::io::BufWriter::new(file);
            dump_advantages(
                &policy,
                &spec,
                kind,
                &beacon_cfg,
                args.groups,
                args.seed,
                &mut writer,
            )?;
            writer.flush().map_err(|e| Error::io(&path, e))?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            dump_advantages(
                &policy,
                &spec,
                kind,
                &beacon_cfg,
                args.groups,
                args.seed,
                &mut lock,
            )?;
        }
    }
    Ok(())
}
