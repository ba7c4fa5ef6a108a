use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use equiflow::bench::{
    evaluate, generate_dataset, load_dataset, save_dataset, training_samples, ChunkPolicy, EvalReport, ExpertPolicy,
    FlowPolicy, Perturbation, RandomPolicy, Task,
};
use equiflow::config::{ModelKind, RunConfig, RESOLVED_CONFIG};
use equiflow::equivcheck::{policy_velocity_check, run_check, CheckReport, CHECKS};
use equiflow::flow::{sample_source, time_sampler, train};
use equiflow::gradcheck::{self, GradReport};
use equiflow::params::ParamStore;
use equiflow::policy::{prepare, Model, PreparedObs, ACTION_SIG};
use equiflow::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Checkpoint sentinels that stand in for a trained policy.
const EXPERT: &str = "expert";
const RANDOM: &str = "random";
const PARAMS_FILE: &str = "params.bin";
const EMA_FILE: &str = "ema.bin";
const METRICS_FILE: &str = "metrics.jsonl";
const TIMING_FILE: &str = "timing.jsonl";
/// Gradient checks of these operations must be exact up to finite-difference noise.
const LINEAR_OPS: &[&str] = &["equi_linear", "time_ops"];
/// A non-equivariant model is expected to violate equivariance by at least this much.
const EXPECTED_DEFECT: f64 = 0.1;

#[derive(Parser, Debug)]
#[command(name = "equiflow", version, about = "Equivariant rectified-flow policies on a toy manipulation bench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (TOML); the flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for this command: data seed for gen-data, training seed for
    /// train, evaluation seed for eval and sweep-steps, check seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// reach | pick-place
    #[arg(long, global = true)]
    task: Option<Task>,
    /// equivariant | mlp-baseline
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate expert demonstrations (demos.bin + manifest.json).
    GenData {
        /// Number of demos.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a policy; writes params, EMA params, metrics and the resolved config.
    Train {
        /// Saved dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of demos to generate when no dataset is given.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Drop the image branch from the equivariant policy.
        #[arg(long)]
        no_fusion: bool,
    },
    /// Closed-loop evaluation, one row per perturbation.
    Eval {
        /// Parameter file, run directory, `expert` or `random`.
        #[arg(long)]
        checkpoint: String,
        /// none | haar | yaw:<deg> | tilt:<deg>; repeatable. Defaults to the config.
        #[arg(long = "perturb")]
        perturb: Vec<Perturbation>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Euler steps per sampled chunk.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Success rate and sampler cost per number of Euler steps.
    SweepSteps {
        /// Parameter file or run directory of a trained policy.
        #[arg(long)]
        checkpoint: String,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',', required = true)]
        steps: Vec<usize>,
        #[arg(long)]
        perturb: Option<Perturbation>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Timing repetitions per step count.
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Equivariance conformance of every layer and of the policy's velocity field.
    EquivCheck {
        /// Comma-separated subset of checks; `policy` is the whole velocity field.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        /// Trained parameters for the policy check; fresh random ones otherwise.
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Render the rotated scene's own gripper image instead of reusing the canonical one.
        #[arg(long)]
        live_image: bool,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// Comma-separated subset of operations.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        #[arg(long, default_value_t = gradcheck::FD_STEP)]
        step: f64,
    },
}

#[derive(Debug)]
enum Fail {
    Usage(String),
    Runtime(String),
    Conformance(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Runtime(e.to_string())
    }
}

type Res<T> = Result<T, Fail>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.common.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli.cmd, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(Fail::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Conformance(m)) => {
            eprintln!("conformance failure: {m}");
            ExitCode::from(3)
        }
    }
}

/// Config file (or defaults) with the common overrides applied.
fn base_config(c: &Common) -> Res<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| Fail::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(t) = c.task {
        cfg.task = t;
    }
    if let Some(m) = c.model {
        cfg.model = m;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn checked(cfg: RunConfig) -> Res<RunConfig> {
    cfg.validate().map_err(|e| Fail::Usage(e.to_string()))?;
    Ok(cfg)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Res<()> {
    let mut f = fs::File::create(path)?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r).map_err(Error::from)?)?;
    }
    Ok(())
}

fn run(cmd: Cmd, c: &Common) -> Res<()> {
    match cmd {
        Cmd::GenData { n } => gen_data(c, n),
        Cmd::Train { data, n, epochs, lr, batch_size, no_fusion } => {
            let mut cfg = base_config(c)?;
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            if data.is_some() {
                cfg.data = data;
            }
            if let Some(n) = n {
                cfg.n_demos = n;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if no_fusion {
                cfg.fusion = false;
            }
            cmd_train(checked(cfg)?)
        }
        Cmd::Eval { checkpoint, perturb, episodes, steps } => {
            let mut cfg = run_config_for(c, Some(&checkpoint))?;
            if let Some(e) = episodes {
                cfg.eval_episodes = e;
            }
            if let Some(s) = steps {
                cfg.sampler_steps = s;
            }
            let cfg = checked(cfg)?;
            let perturb = if perturb.is_empty() { vec![cfg.perturbation().map_err(|e| Fail::Usage(e.to_string()))?] } else { perturb };
            cmd_eval(&cfg, &checkpoint, &perturb)
        }
        Cmd::SweepSteps { checkpoint, steps, perturb, episodes, reps } => {
            if steps.is_empty() || steps.contains(&0) {
                return Err(Fail::Usage("--steps needs one or more positive step counts".into()));
            }
            if reps == 0 {
                return Err(Fail::Usage("--reps must be positive".into()));
            }
            let mut cfg = run_config_for(c, Some(&checkpoint))?;
            if let Some(e) = episodes {
                cfg.eval_episodes = e;
            }
            let cfg = checked(cfg)?;
            let p = match perturb {
                Some(p) => p,
                None => cfg.perturbation().map_err(|e| Fail::Usage(e.to_string()))?,
            };
            cmd_sweep(&cfg, &checkpoint, &steps, p, reps)
        }
        Cmd::EquivCheck { layers, checkpoint, cases, live_image } => {
            if cases == 0 {
                return Err(Fail::Usage("--cases must be positive".into()));
            }
            let cfg = checked(run_config_for(c, checkpoint.as_deref())?)?;
            cmd_equiv(&cfg, c.seed.unwrap_or(0), &layers, checkpoint.as_deref(), cases, live_image)
        }
        Cmd::GradCheck { ops, step } => {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Fail::Usage(format!("--step must be positive, got {step}")));
            }
            let cfg = base_config(c)?;
            cmd_grad(&cfg, c.seed.unwrap_or(0), &ops, step)
        }
    }
}

/// Configuration for commands that read a checkpoint: an explicit `--config`
/// wins, then the resolved config saved next to the checkpoint.
fn run_config_for(c: &Common, checkpoint: Option<&str>) -> Res<RunConfig> {
    let mut common = c.clone();
    if common.config.is_none() {
        if let Some(ck) = checkpoint.filter(|k| *k != EXPERT && *k != RANDOM) {
            let p = Path::new(ck);
            let dir = if p.is_dir() { Some(p) } else { p.parent() };
            if let Some(cand) = dir.map(|d| d.join(RESOLVED_CONFIG)).filter(|f| f.is_file()) {
                common.config = Some(cand);
            }
        }
    }
    let mut cfg = base_config(&common)?;
    if let Some(s) = c.seed {
        cfg.eval_seed = s;
    }
    Ok(cfg)
}

fn gen_data(c: &Common, n: Option<usize>) -> Res<()> {
    let mut cfg = base_config(c)?;
    if let Some(n) = n {
        cfg.n_demos = n;
    }
    if let Some(s) = c.seed {
        cfg.data_seed = s;
    }
    let cfg = checked(cfg)?;
    let (demos, manifest) = generate_dataset(cfg.task, cfg.n_demos, cfg.data_seed)?;
    save_dataset(&cfg.out, &demos, &manifest)?;
    cfg.save_resolved(&cfg.out)?;
    println!(
        "{} {} demos, {} steps, {} rejected scenes -> {}",
        cfg.task,
        manifest.n_demos,
        manifest.total_steps,
        manifest.rejected_seeds.len(),
        cfg.out.display()
    );
    Ok(())
}

fn cmd_train(mut cfg: RunConfig) -> Res<()> {
    let demos = match &cfg.data {
        Some(dir) => {
            let (demos, manifest) = load_dataset(dir)?;
            if manifest.task != cfg.task {
                return Err(Fail::Usage(format!("dataset holds {} demos but the task is {}", manifest.task, cfg.task)));
            }
            cfg.n_demos = manifest.n_demos;
            cfg.data_seed = manifest.seed;
            demos
        }
        None => generate_dataset(cfg.task, cfg.n_demos, cfg.data_seed)?.0,
    };
    let data = training_samples(&demos, cfg.horizon)?;
    let (model, init) = Model::build(&cfg.model_config(), cfg.seed)?;
    let out = &cfg.out;
    cfg.save_resolved(out)?;
    log::info!("training {} on {} samples, {} parameters", cfg.model.as_str(), data.len(), init.num_scalars());
    let mut metrics = fs::File::create(out.join(METRICS_FILE))?;
    let mut io_err = None;
    let outcome = train(&model, init, &data, &cfg.train_config(), |r| {
        log::info!("epoch {} loss {:.5} probe {:.5}", r.epoch, r.loss, r.probe_loss);
        let line = serde_json::to_string(r).expect("records serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let timing: Vec<serde_json::Value> = outcome
        .epoch_seconds
        .iter()
        .enumerate()
        .map(|(epoch, s)| serde_json::json!({ "epoch": epoch, "seconds": s }))
        .collect();
    write_jsonl(&out.join(TIMING_FILE), &timing)?;
    outcome.params.save(out.join(PARAMS_FILE))?;
    outcome.ema.save(out.join(EMA_FILE))?;
    let last = outcome.records.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs: loss {:.6}, probe loss {:.6} -> {}",
        cfg.model.as_str(),
        cfg.epochs,
        last.loss,
        last.probe_loss,
        out.display()
    );
    Ok(())
}

/// A policy source: a trained model or one of the sentinels.
enum Loaded {
    Expert,
    Random,
    Trained(Model, ParamStore),
}

fn load_checkpoint(cfg: &RunConfig, checkpoint: &str) -> Res<Loaded> {
    match checkpoint {
        EXPERT => return Ok(Loaded::Expert),
        RANDOM => return Ok(Loaded::Random),
        _ => {}
    }
    let mut path = PathBuf::from(checkpoint);
    if path.is_dir() {
        path = path.join(EMA_FILE);
    }
    if !path.is_file() {
        return Err(Fail::Runtime(format!("checkpoint {} does not exist", path.display())));
    }
    let (model, mut store) = Model::build(&cfg.model_config(), cfg.seed)?;
    let saved = ParamStore::load(&path)?;
    store.load_from(&saved).map_err(|e| {
        Fail::Runtime(format!("checkpoint {} does not match the {} model: {e}", path.display(), cfg.model.as_str()))
    })?;
    Ok(Loaded::Trained(model, store))
}

fn run_eval(loaded: &Loaded, task: Task, horizon: usize, steps: usize, episodes: usize, p: Perturbation, seed: u64) -> Res<EvalReport> {
    let mut policy: Box<dyn ChunkPolicy + '_> = match loaded {
        Loaded::Expert => Box::new(ExpertPolicy { horizon }),
        Loaded::Random => Box::new(RandomPolicy { horizon }),
        Loaded::Trained(model, store) => Box::new(FlowPolicy { model, store, steps }),
    };
    Ok(evaluate(policy.as_mut(), task, episodes, p, seed)?)
}

fn print_eval_header() {
    println!("{:<11} {:<14} {:<10} {:>5} {:>8} {:>9} {:>8} {:>8}", "task", "policy", "perturb", "steps", "episodes", "successes", "rate", "mean_len");
}

fn print_eval_row(policy: &str, steps: usize, r: &EvalReport) {
    println!(
        "{:<11} {:<14} {:<10} {:>5} {:>8} {:>9} {:>8.3} {:>8.2}",
        r.task.to_string(),
        policy,
        r.perturbation,
        steps,
        r.episodes,
        r.successes,
        r.success_rate,
        r.mean_episode_length
    );
}

fn policy_label(cfg: &RunConfig, loaded: &Loaded) -> &'static str {
    match loaded {
        Loaded::Expert => EXPERT,
        Loaded::Random => RANDOM,
        Loaded::Trained(..) => cfg.model.as_str(),
    }
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &str, perturb: &[Perturbation]) -> Res<()> {
    let loaded = load_checkpoint(cfg, checkpoint)?;
    let label = policy_label(cfg, &loaded);
    fs::create_dir_all(&cfg.out)?;
    let mut reports = Vec::new();
    print_eval_header();
    for &p in perturb {
        let r = run_eval(&loaded, cfg.task, cfg.horizon, cfg.sampler_steps, cfg.eval_episodes, p, cfg.eval_seed)?;
        print_eval_row(label, cfg.sampler_steps, &r);
        reports.push(r);
    }
    write_jsonl(&cfg.out.join("eval.jsonl"), &reports)?;
    Ok(())
}

#[derive(Serialize)]
struct SweepTiming {
    steps: usize,
    /// Mean seconds to integrate one batch of chunks.
    integrate_seconds: f64,
    /// Mean seconds to compute the batch's conditioning.
    condition_seconds: f64,
    batch: usize,
}

fn cmd_sweep(cfg: &RunConfig, checkpoint: &str, steps: &[usize], p: Perturbation, reps: usize) -> Res<()> {
    let loaded = load_checkpoint(cfg, checkpoint)?;
    let (model, store) = match &loaded {
        Loaded::Trained(m, s) => (m, s),
        _ => return Err(Fail::Usage("sweep-steps needs a trained checkpoint".into())),
    };
    fs::create_dir_all(&cfg.out)?;
    let (demos, _) = generate_dataset(cfg.task, 1, cfg.eval_seed)?;
    let prepared: Vec<PreparedObs> =
        demos[0].steps.iter().take(8).map(|s| prepare(&s.obs)).collect::<Result<_, _>>()?;
    let refs: Vec<&PreparedObs> = prepared.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    let sources: Vec<_> = refs.iter().map(|_| sample_source(ACTION_SIG, model.horizon(), &mut rng)).collect();
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64();

    let (mut reports, mut timings) = (Vec::new(), Vec::new());
    println!(
        "{:<11} {:<10} {:>5} {:>8} {:>8} {:>8} {:>14} {:>14}",
        "task", "perturb", "steps", "episodes", "rate", "mean_len", "integrate_ms", "per_step_ms"
    );
    for &n in steps {
        let r = run_eval(&loaded, cfg.task, cfg.horizon, n, cfg.eval_episodes, p, cfg.eval_seed)?;
        let t = time_sampler(model, store, &refs, &sources, n, reps, &clock)?;
        println!(
            "{:<11} {:<10} {:>5} {:>8} {:>8.3} {:>8.2} {:>14.3} {:>14.3}",
            r.task.to_string(),
            r.perturbation,
            n,
            r.episodes,
            r.success_rate,
            r.mean_episode_length,
            1e3 * t.integrate,
            1e3 * t.integrate / n as f64
        );
        reports.push(serde_json::json!({ "steps": n, "report": r }));
        timings.push(SweepTiming { steps: n, integrate_seconds: t.integrate, condition_seconds: t.condition, batch: refs.len() });
    }
    write_jsonl(&cfg.out.join("sweep.jsonl"), &reports)?;
    write_jsonl(&cfg.out.join("sweep_timing.jsonl"), &timings)?;
    Ok(())
}

#[derive(Serialize)]
struct EquivRow {
    #[serde(flatten)]
    report: CheckReport,
    status: &'static str,
}

fn cmd_equiv(
    cfg: &RunConfig,
    seed: u64,
    layers: &[String],
    checkpoint: Option<&str>,
    cases: usize,
    live_image: bool,
) -> Res<()> {
    let mut known: Vec<&str> = CHECKS.to_vec();
    known.push("policy");
    let selected: Vec<String> = if layers.is_empty() {
        match cfg.model {
            ModelKind::Equivariant => known.iter().map(|s| s.to_string()).collect(),
            ModelKind::MlpBaseline => vec!["policy".into()],
        }
    } else {
        layers.to_vec()
    };
    if let Some(bad) = selected.iter().find(|l| !known.contains(&l.as_str())) {
        return Err(Fail::Usage(format!("unknown check '{bad}' (known: {})", known.join(", "))));
    }
    let mlp = cfg.model == ModelKind::MlpBaseline;
    if mlp && selected.iter().any(|l| l != "policy") {
        return Err(Fail::Usage("the mlp-baseline model only has the `policy` check".into()));
    }
    fs::create_dir_all(&cfg.out)?;
    let mut rows = Vec::new();
    println!("{:<16} {:>6} {:>12} {:>10} {:<9} status", "check", "cases", "violation", "tolerance", "kind");
    for layer in &selected {
        let (report, status) = if layer == "policy" {
            let (model, store) = match checkpoint {
                Some(ck) => match load_checkpoint(cfg, ck)? {
                    Loaded::Trained(m, s) => (m, s),
                    _ => return Err(Fail::Usage("the policy check needs a trained checkpoint or none".into())),
                },
                None => fresh_model(cfg, seed)?,
            };
            let r = policy_velocity_check(&model, &store, cases.min(20), live_image, seed)?;
            let status = match (mlp, r.passed(), r.max_violation >= EXPECTED_DEFECT) {
                (false, true, _) => "PASS",
                (false, false, _) => "FAIL",
                (true, _, true) => "EXPECTED-FAIL",
                (true, _, false) => "UNEXPECTED-PASS",
            };
            (r, status)
        } else {
            let r = run_check(layer, cases, seed)?;
            let status = if r.passed() { "PASS" } else { "FAIL" };
            (r, status)
        };
        println!(
            "{:<16} {:>6} {:>12.3e} {:>10.0e} {:<9} {status}",
            report.check,
            report.cases,
            report.max_violation,
            report.tolerance,
            if report.relative { "relative" } else { "absolute" }
        );
        rows.push(EquivRow { report, status });
    }
    write_jsonl(&cfg.out.join("equiv_check.jsonl"), &rows)?;
    let failed: Vec<&str> =
        rows.iter().filter(|r| r.status == "FAIL" || r.status == "UNEXPECTED-PASS").map(|r| r.report.check.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::Conformance(format!("checks out of tolerance: {}", failed.join(", "))))
    }
}

/// Random parameters with a non-zero output head, so the check is not trivially satisfied.
fn fresh_model(cfg: &RunConfig, seed: u64) -> Res<(Model, ParamStore)> {
    let mut mc = cfg.model_config();
    match &mut mc {
        equiflow::policy::ModelConfig::Equivariant(c) => c.zero_head = false,
        equiflow::policy::ModelConfig::MlpBaseline(c) => c.zero_head = false,
    }
    Ok(Model::build(&mc, seed)?)
}

fn cmd_grad(cfg: &RunConfig, seed: u64, ops: &[String], step: f64) -> Res<()> {
    let selected: Vec<String> =
        if ops.is_empty() { gradcheck::OPS.iter().map(|s| s.to_string()).collect() } else { ops.to_vec() };
    if let Some(bad) = selected.iter().find(|o| !gradcheck::OPS.contains(&o.as_str())) {
        return Err(Fail::Usage(format!("unknown operation '{bad}' (known: {})", gradcheck::OPS.join(", "))));
    }
    fs::create_dir_all(&cfg.out)?;
    #[derive(Serialize)]
    struct Row {
        #[serde(flatten)]
        report: GradReport,
        tolerance: f64,
        passed: bool,
    }
    let mut rows = Vec::new();
    println!("{:<14} {:>8} {:>12} {:>10} {:<24} status", "op", "checked", "rel_error", "tolerance", "worst");
    for op in &selected {
        let report = gradcheck::run_with_step(op, seed, step)?;
        let tolerance = if LINEAR_OPS.contains(&op.as_str()) { 1e-7 } else { 1e-4 };
        let passed = report.max_rel_error <= tolerance;
        println!(
            "{:<14} {:>8} {:>12.3e} {:>10.0e} {:<24} {}",
            report.op,
            report.checked,
            report.max_rel_error,
            tolerance,
            report.worst,
            if passed { "PASS" } else { "FAIL" }
        );
        rows.push(Row { report, tolerance, passed });
    }
    write_jsonl(&cfg.out.join("grad_check.jsonl"), &rows)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.report.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::Conformance(format!("gradients out of tolerance: {}", failed.join(", "))))
    }
}
