//! Command-line pipeline for the terrain-conditioned dynamics toolkit.
//!
//! Subcommands cover the whole workflow: `genworld` snapshots a synthetic
//! world, `dataset` drives it and extracts trajectory windows, `train` fits
//! a hybrid model, `eval` reports per-bucket endpoint errors, `ablate`
//! sweeps model sizes, and `plan` runs the sampling-based planner both as a
//! one-shot and closed loop. Parameters resolve as CLI flag over config
//! file over default; every run writes its resolved config next to the
//! outputs, and rerunning from that snapshot reproduces the outputs byte
//! for byte.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure.

mod commands;
mod params;

use std::path::Path;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use terradyn::io::KvDoc;
use terradyn::TdError;

use params::{
    AblateParams, DatasetParams, EvalParams, PlanParams, TrainParams, WorldParams,
};

#[derive(Parser)]
#[command(
    name = "terradyn",
    version,
    about = "Terrain-conditioned vehicle dynamics: synthetic world, training, evaluation, planning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic world snapshot (terrain, features, PCA basis).
    Genworld(GenworldArgs),
    /// Drive the world with scripted policies and extract a dataset.
    Dataset(DatasetArgs),
    /// Train a hybrid dynamics model on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained model per distance bucket.
    Eval(EvalArgs),
    /// Sweep encoder or PCA sizes and compare against a baseline.
    Ablate(AblateArgs),
    /// Plan and drive toward a goal in a generated world.
    Plan(PlanArgs),
}

#[derive(Args)]
struct GenworldArgs {
    /// Key-value config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Side length of the mapped square, meters.
    #[arg(long)]
    extent: Option<f64>,
    /// Number of terrain classes.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    sharpness: Option<f64>,
    #[arg(long)]
    steepness: Option<f64>,
    #[arg(long)]
    residual_scale: Option<f64>,
    /// Raw synthetic feature dimension.
    #[arg(long)]
    n_vfm: Option<usize>,
    /// Retained PCA components.
    #[arg(long)]
    n_pca: Option<usize>,
    #[arg(long)]
    pca_samples: Option<usize>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    config: Option<String>,
    /// World directory or world.txt path.
    #[arg(long)]
    world: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Number of independent driving logs.
    #[arg(long)]
    logs: Option<usize>,
    /// Per-log duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon_steps: Option<usize>,
    #[arg(long)]
    tau_steps: Option<usize>,
    #[arg(long)]
    stride_steps: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Feature mode: none, direct, or compressed.
    #[arg(long)]
    mode: Option<String>,
    /// Distance mode: hindsight or randomized.
    #[arg(long)]
    distance: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    physics_lr_mult: Option<f64>,
    /// Six comma-separated loss weights on (p_x, p_y, phi, v_x, v_y, r).
    #[arg(long)]
    loss_weights: Option<String>,
    #[arg(long)]
    n_pca: Option<usize>,
    #[arg(long)]
    n_encoder: Option<usize>,
    /// Truncated backprop length; 0 backpropagates the whole window.
    #[arg(long)]
    tbptt_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    delay_epochs: Option<usize>,
    #[arg(long)]
    delay_segments: Option<usize>,
    #[arg(long)]
    delay_segment_steps: Option<usize>,
    #[arg(long)]
    delay_batch: Option<usize>,
    #[arg(long)]
    delay_lr: Option<f64>,
    #[arg(long)]
    delay_seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    /// Trained model checkpoint.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Comma-separated bucket indices, 0 = hindsight.
    #[arg(long)]
    buckets: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Sweep axis: encoder or pca.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated sizes to sweep.
    #[arg(long)]
    values: Option<String>,
    #[command(flatten)]
    train: SharedTrainArgs,
}

/// Training knobs shared between `train` and `ablate`.
#[derive(Args)]
struct SharedTrainArgs {
    #[arg(long)]
    distance: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    physics_lr_mult: Option<f64>,
    #[arg(long)]
    loss_weights: Option<String>,
    #[arg(long)]
    n_pca: Option<usize>,
    #[arg(long)]
    n_encoder: Option<usize>,
    #[arg(long)]
    tbptt_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    delay_epochs: Option<usize>,
    #[arg(long)]
    delay_segments: Option<usize>,
    #[arg(long)]
    delay_segment_steps: Option<usize>,
    #[arg(long)]
    delay_batch: Option<usize>,
    #[arg(long)]
    delay_lr: Option<f64>,
    #[arg(long)]
    delay_seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    config: Option<String>,
    /// World directory or world.txt path.
    #[arg(long)]
    world: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Goal position "x,y" in meters.
    #[arg(long)]
    goal: Option<String>,
    /// Start pose "x,y,phi".
    #[arg(long)]
    start: Option<String>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    horizon_steps: Option<usize>,
    /// Per-channel noise scale "throttle,brake,steer".
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    w_goal: Option<f64>,
    #[arg(long)]
    w_invalid: Option<f64>,
    #[arg(long)]
    w_effort: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replan_interval: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    goal_radius: Option<f64>,
    #[arg(long)]
    obs_radius: Option<f64>,
    #[arg(long)]
    map_resolution: Option<f64>,
    /// Map dimensions "x,y,z" in meters.
    #[arg(long)]
    map_extent: Option<String>,
    /// Noisy sample trajectories to export alongside the chosen plan.
    #[arg(long)]
    export_samples: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

enum CliError {
    Usage(String),
    Runtime(TdError),
}

impl From<TdError> for CliError {
    fn from(e: TdError) -> Self {
        match e {
            TdError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

fn usage(e: TdError) -> CliError {
    CliError::Usage(e.to_string())
}

fn read_config(path: &Option<String>) -> Result<Option<KvDoc>, CliError> {
    match path {
        None => Ok(None),
        Some(p) => KvDoc::read(Path::new(p)).map(Some).map_err(usage),
    }
}

fn check_input(path: &str, what: &str) -> Result<(), CliError> {
    if Path::new(path).exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {path}")))
    }
}

fn init_workers(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

macro_rules! overlay {
    ($p:expr, $a:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = &$a.$field {
            $p.$field = v.clone();
        })+
    };
}

macro_rules! overlay_opt {
    ($p:expr, $a:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = &$a.$field {
            $p.$field = Some(v.clone());
        })+
    };
}

fn resolve_genworld(a: &GenworldArgs) -> Result<WorldParams, CliError> {
    let mut p = WorldParams::default();
    if let Some(doc) = read_config(&a.config)? {
        p.overlay_doc(&doc).map_err(usage)?;
    }
    overlay_opt!(p, a, out);
    overlay!(p, a, seed, extent, classes, sharpness, steepness, residual_scale, n_vfm, n_pca, pca_samples, workers);
    Ok(p)
}

fn resolve_dataset(a: &DatasetArgs) -> Result<DatasetParams, CliError> {
    let mut p = DatasetParams::default();
    if let Some(doc) = read_config(&a.config)? {
        p.overlay_doc(&doc).map_err(usage)?;
    }
    overlay_opt!(p, a, world, out);
    overlay!(p, a, logs, duration, train_frac, seed, horizon_steps, tau_steps, stride_steps, workers);
    Ok(p)
}

fn overlay_shared(p: &mut TrainParams, a: &SharedTrainArgs) {
    overlay!(p, a, distance, epochs, batch_size, lr, physics_lr_mult, loss_weights, n_pca, n_encoder, tbptt_steps, seed);
    overlay!(p, a, delay_epochs, delay_segments, delay_segment_steps, delay_batch, delay_lr, delay_seed, workers);
}

fn resolve_train(a: &TrainArgs) -> Result<TrainParams, CliError> {
    let mut p = TrainParams::default();
    if let Some(doc) = read_config(&a.config)? {
        p.overlay_doc(&doc).map_err(usage)?;
    }
    overlay_opt!(p, a, dataset, out);
    overlay!(p, a, mode, distance, epochs, batch_size, lr, physics_lr_mult, loss_weights, n_pca, n_encoder, tbptt_steps, seed);
    overlay!(p, a, delay_epochs, delay_segments, delay_segment_steps, delay_batch, delay_lr, delay_seed, workers);
    Ok(p)
}

fn resolve_eval(a: &EvalArgs) -> Result<EvalParams, CliError> {
    let mut p = EvalParams::default();
    if let Some(doc) = read_config(&a.config)? {
        p.overlay_doc(&doc).map_err(usage)?;
    }
    overlay_opt!(p, a, dataset, model, out);
    overlay!(p, a, buckets, workers);
    Ok(p)
}

fn resolve_ablate(a: &AblateArgs) -> Result<AblateParams, CliError> {
    let mut p = AblateParams::default();
    if let Some(doc) = read_config(&a.config)? {
        p.overlay_doc(&doc).map_err(usage)?;
    }
    overlay_opt!(p, a, dataset, out);
    overlay!(p, a, axis, values);
    overlay_shared(&mut p.train, &a.train);
    Ok(p)
}

fn resolve_plan(a: &PlanArgs) -> Result<PlanParams, CliError> {
    let mut p = PlanParams::default();
    if let Some(doc) = read_config(&a.config)? {
        p.overlay_doc(&doc).map_err(usage)?;
    }
    overlay_opt!(p, a, world, model, out);
    overlay!(p, a, goal, start, n_samples, horizon_steps, noise, lambda, w_goal, w_invalid, w_effort, seed);
    overlay!(p, a, replan_interval, max_steps, goal_radius, obs_radius, map_resolution, map_extent, export_samples, workers);
    Ok(p)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Genworld(a) => {
            let p = resolve_genworld(a)?;
            params::require_path(&p.out, "out").map_err(usage)?;
            init_workers(p.workers);
            commands::run_genworld(&p).map_err(CliError::from)
        }
        Cmd::Dataset(a) => {
            let p = resolve_dataset(a)?;
            check_input(params::require_path(&p.world, "world").map_err(usage)?, "world")?;
            params::require_path(&p.out, "out").map_err(usage)?;
            init_workers(p.workers);
            commands::run_dataset(&p).map_err(CliError::from)
        }
        Cmd::Train(a) => {
            let p = resolve_train(a)?;
            check_input(params::require_path(&p.dataset, "dataset").map_err(usage)?, "dataset")?;
            params::require_path(&p.out, "out").map_err(usage)?;
            commands::training_config(&p).map_err(usage)?;
            init_workers(p.workers);
            commands::run_train(&p).map_err(CliError::from)
        }
        Cmd::Eval(a) => {
            let p = resolve_eval(a)?;
            check_input(params::require_path(&p.dataset, "dataset").map_err(usage)?, "dataset")?;
            check_input(params::require_path(&p.model, "model").map_err(usage)?, "model")?;
            params::require_path(&p.out, "out").map_err(usage)?;
            init_workers(p.workers);
            commands::run_eval(&p).map_err(CliError::from)
        }
        Cmd::Ablate(a) => {
            let p = resolve_ablate(a)?;
            check_input(params::require_path(&p.dataset, "dataset").map_err(usage)?, "dataset")?;
            params::require_path(&p.out, "out").map_err(usage)?;
            init_workers(p.train.workers);
            commands::run_ablate(&p).map_err(CliError::from)
        }
        Cmd::Plan(a) => {
            let p = resolve_plan(a)?;
            check_input(params::require_path(&p.world, "world").map_err(usage)?, "world")?;
            check_input(params::require_path(&p.model, "model").map_err(usage)?, "model")?;
            params::require_path(&p.out, "out").map_err(usage)?;
            init_workers(p.workers);
            commands::run_plan(&p).map_err(CliError::from)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's help/version "errors" are successful exits.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
