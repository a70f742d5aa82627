//! Experiment harness: the end-to-end training loop, config files, seeded
//! evaluation, the ablation-suite runner, and metrics output.
//!
//! Each iteration runs the same fixed sequence: sample rollouts, detect
//! milestones and partition, shape rewards, compute trajectory- and
//! segment-level advantages, combine, update. Every random draw comes from
//! a stream keyed by `(seed, role, iteration, index)`, and all reductions
//! run in a fixed order, so a `(config, seed)` pair produces byte-identical
//! metrics no matter how many worker threads run the rollouts
//! (`BEACON_THREADS` or the `threads` key caps the pool).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::advantage::{estimate_observed, EstimatorKind, Phase};
use crate::diagnostics::{
    car_pooled, categorize_pooled, ccr_pooled, egr_pooled, zar_pooled, MetricsRow, METRICS_HEADER,
    TAU_ZERO,
};
use crate::env::{load_env_spec, ChainCraftEnv, ChainCraftSpec, HorizonBucket};
use crate::error::{Error, Result};
use crate::policy::{
    batch_entropy, evaluate_pool, l2_norm, sample_rollouts, CheckpointMeta, Optimizer,
    OptimizerKind, SoftmaxPolicy,
};
use crate::rng::{Role, StreamRng};
use crate::types::{AdvantageTensor, BeaconConfig, GroupBatch};

/// Stages of one training iteration, in the only order the trainer may run
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Sample,
    Partition,
    Shape,
    TrajAdvantage,
    SegAdvantage,
    Combine,
    Update,
}

impl From<Phase> for TrainPhase {
    fn from(p: Phase) -> Self {
        match p {
            Phase::Partition => TrainPhase::Partition,
            Phase::Shape => TrainPhase::Shape,
            Phase::TrajAdvantage => TrainPhase::TrajAdvantage,
            Phase::SegAdvantage => TrainPhase::SegAdvantage,
            Phase::Combine => TrainPhase::Combine,
        }
    }
}

/// Everything one run needs: algorithm parameters, the environment, the
/// estimator under test, and loop sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub beacon: BeaconConfig<f64>,
    pub env: ChainCraftSpec,
    pub estimator: EstimatorKind,
    pub iterations: usize,
    pub tasks_per_iter: usize,
    pub eval_episodes: usize,
    /// Evaluate every N iterations (0 = final evaluation only).
    pub eval_every: usize,
    /// Greedy action selection at eval time; sampled by default to match
    /// training-time success reporting.
    pub eval_greedy: bool,
    pub optimizer: OptimizerKind,
    /// Worker cap; `None` defers to BEACON_THREADS, `Some(0)` to the rayon
    /// default.
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults around a given environment: BEACON estimator, 100
    /// iterations, 8 groups of 8.
    pub fn new(env: ChainCraftSpec) -> Self {
        let beacon = BeaconConfig {
            max_horizon: env.max_horizon,
            ..BeaconConfig::default()
        };
        Self {
            beacon,
            env,
            estimator: EstimatorKind::Beacon,
            iterations: 100,
            tasks_per_iter: 8,
            eval_episodes: 512,
            eval_every: 0,
            eval_greedy: false,
            optimizer: OptimizerKind::Sgd,
            threads: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.beacon.validate()?;
        self.env.validate()?;
        self.estimator.validate()?;
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.tasks_per_iter < 1 {
            return Err(Error::InvalidConfig("tasks_per_iter must be >= 1".into()));
        }
        if self.eval_episodes < 1 {
            return Err(Error::InvalidConfig("eval_episodes must be >= 1".into()));
        }
        Ok(())
    }

    fn effective_threads(&self) -> usize {
        match self.threads {
            Some(n) => n,
            None => std::env::var("BEACON_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(0),
        }
    }
}

// --- config files -----------------------------------------------------------
//
// Flat key=value text. `env` points at an environment spec file, resolved
// relative to the config file's directory. All other keys are optional and
// fall back to the defaults of `ExperimentConfig::new`:
//
//   env = envs/long.env
//   algo = beacon            (beacon|grpo|no_traj|no_seg|random_partition|dropout=<p>)
//   gamma = 0.95
//   lambda = 1.0
//   milestone_reward = 1.0
//   epsilon_norm = 1e-8
//   clip_epsilon = 0.2
//   group_size = 8
//   learning_rate = 0.5
//   seed = 0
//   iterations = 300
//   tasks_per_iter = 8
//   eval_episodes = 512
//   eval_every = 0
//   eval_greedy = false
//   optimizer = sgd          (sgd|adam)
//   threads = 0
//   out_dir = runs/long-beacon

pub fn parse_experiment_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut env_path: Option<PathBuf> = None;
    let mut entries: Vec<(String, String, usize)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!(
                "line {}: expected key=value, got '{raw}'",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key == "env" {
            env_path = Some(base_dir.join(value));
        } else {
            entries.push((key, value, lineno + 1));
        }
    }
    let env_path = env_path.ok_or_else(|| Error::InvalidConfig("missing key 'env'".into()))?;
    let env = load_env_spec(&env_path)?;
    let mut cfg = ExperimentConfig::new(env);

    for (key, value, lineno) in entries {
        let bad = |what: &str| Error::InvalidConfig(format!("line {lineno}: bad {what} '{value}'"));
        match key.as_str() {
            "algo" => cfg.estimator = value.parse()?,
            "gamma" => cfg.beacon.gamma = value.parse().map_err(|_| bad("number"))?,
            "lambda" => cfg.beacon.lambda_weight = value.parse().map_err(|_| bad("number"))?,
            "milestone_reward" => {
                cfg.beacon.milestone_reward = value.parse().map_err(|_| bad("number"))?
            }
            "epsilon_norm" => cfg.beacon.epsilon_norm = value.parse().map_err(|_| bad("number"))?,
            "clip_epsilon" => cfg.beacon.clip_epsilon = value.parse().map_err(|_| bad("number"))?,
            "group_size" => cfg.beacon.group_size = value.parse().map_err(|_| bad("integer"))?,
            "learning_rate" => {
                cfg.beacon.learning_rate = value.parse().map_err(|_| bad("number"))?
            }
            "seed" => cfg.beacon.seed = value.parse().map_err(|_| bad("integer"))?,
            "iterations" => cfg.iterations = value.parse().map_err(|_| bad("integer"))?,
            "tasks_per_iter" => cfg.tasks_per_iter = value.parse().map_err(|_| bad("integer"))?,
            "eval_episodes" => cfg.eval_episodes = value.parse().map_err(|_| bad("integer"))?,
            "eval_every" => cfg.eval_every = value.parse().map_err(|_| bad("integer"))?,
            "eval_greedy" => cfg.eval_greedy = value.parse().map_err(|_| bad("bool"))?,
            "optimizer" => cfg.optimizer = value.parse()?,
            "threads" => cfg.threads = Some(value.parse().map_err(|_| bad("integer"))?),
            "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "line {lineno}: unknown key '{other}'"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_experiment_config(&text, base).map_err(|e| Error::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

// --- evaluation ---------------------------------------------------------------

/// Success rates from fresh episodes, no learning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    /// Horizon stratum of the evaluated environment (by optimal length).
    pub bucket: HorizonBucket,
}

/// Run `episodes` fresh episodes. Episode `i` draws from the stream
/// `(seed, Eval, [tag, i])`, so reports are reproducible and
/// parallelism-independent.
pub fn evaluate(
    policy: &SoftmaxPolicy<f64>,
    spec: &ChainCraftSpec,
    episodes: usize,
    seed: u64,
    tag: u64,
    greedy: bool,
) -> Result<EvalReport> {
    if episodes < 1 {
        return Err(Error::InvalidParam("eval episodes must be >= 1".into()));
    }
    spec.validate()?;
    if policy.num_states() < spec.num_states() || policy.num_actions() != spec.action_space {
        return Err(Error::ShapeMismatch(format!(
            "policy table {}x{} cannot drive an env with {} states and {} actions",
            policy.num_states(),
            policy.num_actions(),
            spec.num_states(),
            spec.action_space
        )));
    }
    let successes: usize = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamRng::stream(seed, Role::Eval, &[tag, i as u64]);
            let mut env = ChainCraftEnv::new(spec.clone()).expect("spec validated");
            let mut state = env.reset();
            loop {
                let action = if greedy {
                    policy.greedy_action(state)
                } else {
                    policy.sample_action(state, &mut rng).0
                };
                let out = env.step(action, &mut rng);
                if out.done {
                    return (out.terminal_reward == 1.0) as usize;
                }
                state = out.next_state_id;
            }
        })
        .sum();
    Ok(EvalReport {
        episodes,
        success_rate: successes as f64 / episodes as f64,
        bucket: spec.horizon_bucket(),
    })
}

// --- training ---------------------------------------------------------------

/// Final policy plus the full metrics stream of one run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: SoftmaxPolicy<f64>,
    pub records: Vec<MetricsRow>,
    /// Periodic evaluations (iteration, report) when `eval_every > 0`.
    pub evals: Vec<(u64, EvalReport)>,
    pub final_eval: EvalReport,
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    train_observed(cfg, &mut |_| {})
}

/// [`train`] with a phase observer for pipeline-order instrumentation.
pub fn train_observed(
    cfg: &ExperimentConfig,
    observer: &mut dyn FnMut(TrainPhase),
) -> Result<TrainOutput> {
    train_impl(cfg, observer, &mut |_| Ok(()))
}

fn train_impl(
    cfg: &ExperimentConfig,
    observer: &mut dyn FnMut(TrainPhase),
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_threads())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let seed = cfg.beacon.seed;
    let algo = cfg.estimator.to_string();
    let mut policy = SoftmaxPolicy::<f64>::new(cfg.env.num_states(), cfg.env.action_space);
    let mut optimizer = Optimizer::new(
        cfg.optimizer,
        cfg.beacon.learning_rate,
        policy.theta().len(),
    );
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut evals = Vec::new();

    for it in 1..=cfg.iterations as u64 {
        observer(TrainPhase::Sample);
        let groups: Vec<GroupBatch<f64>> = pool.install(|| {
            sample_rollouts(
                &policy,
                &cfg.env,
                cfg.tasks_per_iter,
                cfg.beacon.group_size,
                seed,
                it,
            )
        })?;

        let mut est_rng = StreamRng::stream(seed, Role::Estimator, &[it]);
        let mut tensors: Vec<AdvantageTensor<f64>> = Vec::with_capacity(groups.len());
        for batch in &groups {
            tensors.push(estimate_observed(
                batch,
                cfg.estimator,
                &cfg.beacon,
                &mut est_rng,
                &mut |p| observer(p.into()),
            )?);
        }

        // The iteration's groups pool into one batch for the update and the
        // diagnostics, in (task, member) order.
        let items = || {
            groups.iter().zip(&tensors).flat_map(|(batch, tensor)| {
                batch
                    .trajectories()
                    .iter()
                    .zip(tensor.combined().iter().map(|v| v.as_slice()))
            })
        };
        let trajectories = || items().map(|(t, _)| t);

        let eval = evaluate_pool(&policy, items(), cfg.beacon.clip_epsilon)?;
        let zar = zar_pooled(items().map(|(_, a)| a), TAU_ZERO);
        let car = car_pooled(items(), TAU_ZERO);
        let egr = egr_pooled(items(), TAU_ZERO);
        let ccr = ccr_pooled(items());
        let categories = categorize_pooled(items(), TAU_ZERO);
        let entropy = batch_entropy(&policy, trajectories());
        let total: usize = trajectories().count();
        let successes = trajectories()
            .filter(|t| t.terminal_reward() == 1.0)
            .count();

        observer(TrainPhase::Update);
        let grad_norm = l2_norm(&eval.grad);
        optimizer.step(&mut policy, &eval.grad);

        let row = MetricsRow {
            iteration: it,
            algo: algo.clone(),
            seed,
            success_rate: successes as f64 / total as f64,
            zar_step: zar.step,
            zar_traj: zar.trajectory,
            car,
            egr,
            ccr,
            n_full: categories.full_success,
            n_partial: categories.partial_success,
            n_fail: categories.complete_failure,
            effective_utilization: categories.effective_utilization,
            entropy,
            objective: eval.objective,
            clip_fraction: eval.clip_fraction,
            grad_norm,
        };
        sink(&row)?;
        records.push(row);

        if cfg.eval_every > 0 && (it as usize).is_multiple_of(cfg.eval_every) {
            let report = pool.install(|| {
                evaluate(
                    &policy,
                    &cfg.env,
                    cfg.eval_episodes,
                    seed,
                    it,
                    cfg.eval_greedy,
                )
            })?;
            evals.push((it, report));
        }
    }

    let final_eval = pool.install(|| {
        evaluate(
            &policy,
            &cfg.env,
            cfg.eval_episodes,
            seed,
            cfg.iterations as u64 + 1,
            cfg.eval_greedy,
        )
    })?;
    Ok(TrainOutput {
        policy,
        records,
        evals,
        final_eval,
    })
}

/// Train and persist: `metrics.csv` (streamed row by row), `checkpoint.json`,
/// and `eval.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutput> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let output = train_impl(cfg, &mut |_| {}, &mut |row| {
        writeln!(writer, "{}", row.to_csv_line()).map_err(|e| Error::io(&metrics_path, e))?;
        writer.flush().map_err(|e| Error::io(&metrics_path, e))
    })?;

    let ckpt_path = out_dir.join("checkpoint.json");
    crate::policy::save_checkpoint(
        &output.policy,
        CheckpointMeta {
            iteration: cfg.iterations as u64,
            seed: cfg.beacon.seed,
        },
        &ckpt_path,
    )?;

    let eval_path = out_dir.join("eval.csv");
    let mut eval_file =
        BufWriter::new(fs::File::create(&eval_path).map_err(|e| Error::io(&eval_path, e))?);
    writeln!(eval_file, "iteration,episodes,bucket,success_rate")
        .map_err(|e| Error::io(&eval_path, e))?;
    for (it, report) in output
        .evals
        .iter()
        .chain(std::iter::once(&(cfg.iterations as u64, output.final_eval)))
    {
        writeln!(
            eval_file,
            "{},{},{},{}",
            it,
            report.episodes,
            report.bucket.name(),
            report.success_rate
        )
        .map_err(|e| Error::io(&eval_path, e))?;
    }
    eval_file.flush().map_err(|e| Error::io(&eval_path, e))?;
    Ok(output)
}

// --- suite -------------------------------------------------------------------

/// One aggregated row of a suite run. `bucket` is `None` on error rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub config: String,
    pub algo: String,
    pub bucket: Option<HorizonBucket>,
    pub seeds: usize,
    pub mean_final_success: f64,
    pub std_final_success: f64,
    pub status: String,
}

pub const SUITE_HEADER: &str =
    "config,algo,bucket,seeds,mean_final_success,std_final_success,status";

impl SuiteRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.config,
            self.algo,
            self.bucket.map_or("-", |b| b.name()),
            self.seeds,
            self.mean_final_success,
            self.std_final_success,
            self.status
        )
    }
}

/// Run every config over the seed list and aggregate final success.
/// A failing config gets an error row and the suite continues. Per-run
/// artifacts land in `out_dir/<config-stem>-seed<k>/`.
pub fn run_suite(configs: &[PathBuf], seeds: &[u64], out_dir: &Path) -> Result<Vec<SuiteRow>> {
    if configs.is_empty() {
        return Err(Error::InvalidConfig(
            "suite needs at least one config".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("suite needs at least one seed".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(configs.len());
    for path in configs {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let row = match run_suite_entry(path, &stem, seeds, out_dir) {
            Ok(row) => row,
            Err(e) => SuiteRow {
                config: stem,
                algo: "-".into(),
                bucket: None,
                seeds: 0,
                mean_final_success: f64::NAN,
                std_final_success: f64::NAN,
                status: format!("error: {e}").replace(',', ";"),
            },
        };
        rows.push(row);
    }

    let suite_path = out_dir.join("suite.csv");
    let mut writer =
        BufWriter::new(fs::File::create(&suite_path).map_err(|e| Error::io(&suite_path, e))?);
    writeln!(writer, "{SUITE_HEADER}").map_err(|e| Error::io(&suite_path, e))?;
    for row in &rows {
        writeln!(writer, "{}", row.to_csv_line()).map_err(|e| Error::io(&suite_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&suite_path, e))?;
    Ok(rows)
}

fn run_suite_entry(path: &Path, stem: &str, seeds: &[u64], out_dir: &Path) -> Result<SuiteRow> {
    let base = load_experiment_config(path)?;
    let mut finals = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.beacon.seed = seed;
        let run_dir = out_dir.join(format!("{stem}-seed{seed}"));
        let output = run_experiment(&cfg, &run_dir)?;
        finals.push(output.final_eval.success_rate);
    }
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(SuiteRow {
        config: stem.to_string(),
        algo: base.estimator.to_string(),
        bucket: Some(base.env.horizon_bucket()),
        seeds: seeds.len(),
        mean_final_success: mean,
        std_final_success: var.sqrt(),
        status: "ok".into(),
    })
}

// --- advantage traces ---------------------------------------------------------

#[derive(Serialize)]
struct AdvTraceWire<'a> {
    traj_adv: f64,
    seg_adv: &'a [f64],
    combined: &'a [f64],
    shaped: &'a [f64],
}

/// Sample fresh groups under a policy and dump one JSON line per trajectory
/// with the advantage layers, for case-study tooling.
pub fn dump_advantages<W: Write>(
    policy: &SoftmaxPolicy<f64>,
    spec: &ChainCraftSpec,
    kind: EstimatorKind,
    beacon: &BeaconConfig<f64>,
    groups: usize,
    seed: u64,
    out: &mut W,
) -> Result<()> {
    if groups == 0 {
        return Err(Error::InvalidParam("need at least one group".into()));
    }
    let batches = sample_rollouts(policy, spec, groups, beacon.group_size, seed, 0)?;
    let mut est_rng = StreamRng::stream(seed, Role::Estimator, &[0]);
    for batch in &batches {
        let tensor = crate::advantage::estimate(batch, kind, beacon, &mut est_rng)?;
        for i in 0..batch.group_size() {
            let wire = AdvTraceWire {
                traj_adv: tensor.traj_adv()[i],
                seg_adv: &tensor.seg_adv()[i],
                combined: &tensor.combined()[i],
                shaped: &tensor.shaped_rewards()[i],
            };
            serde_json::to_writer(&mut *out, &wire)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("<adv dump>", e))?;
        }
    }
    Ok(())
}
