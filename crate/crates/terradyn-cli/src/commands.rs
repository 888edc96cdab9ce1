//! Subcommand implementations.
//!
//! Every command creates its output directory, writes the resolved config
//! snapshot as `config.txt` first, produces its artifacts, and finishes by
//! writing `run.log` with a `status = ok` line. A missing or truncated
//! `run.log` therefore marks a partial run. All file contents are fully
//! determined by the resolved config; nothing carries timestamps.

use std::path::{Path, PathBuf};

use terradyn::hybrid::{FeatureMode, HybridModel, HybridSpec};
use terradyn::io::{write_text, KvDoc, TensorBlob};
use terradyn::mppi::{
    perturbed, plan, prepare_start, receding_horizon_drive, rollout_to_trajectory, sample_noise,
    save_plan, DriveConfig, PlannerConfig, PlannerMap,
};
use terradyn::train::{
    ablation_sweep, evaluate, format_reports, train, AblationAxis, DelayFitConfig, DistanceMode,
    EvalReport, TrainingConfig,
};
use terradyn::vehicle::{ControlInput, VehicleState};
use terradyn::world::{
    extract_dataset, fit_feature_pca, generate_logs, generate_terrain_cfg, true_param_set,
    ChunkSpec, Dataset, Scenario, SyntheticFeatureModel, TerrainConfig, BUCKET_LABELS, N_BUCKETS,
};
use terradyn::TdError;

use crate::params::{
    parse_fixed, parse_usize_list, require_path, AblateParams, DatasetParams, EvalParams,
    PlanParams, TrainParams, WorldParams,
};

/// Feature-model and PCA seeds are salted off the world seed so the three
/// generators draw independent streams.
const FM_SEED_SALT: u64 = 0x5eed_f00d;
const PCA_SEED_SALT: u64 = 0xbead;

/// Rebuild the deterministic scenario a world snapshot describes.
pub fn build_scenario(w: &WorldParams) -> Result<Scenario, TdError> {
    let terrain = generate_terrain_cfg(
        w.seed,
        w.extent,
        TerrainConfig {
            k: w.classes,
            sharpness: w.sharpness,
            steepness: w.steepness,
            residual_scale: w.residual_scale,
        },
    );
    let features = SyntheticFeatureModel::new(w.seed ^ FM_SEED_SALT, w.classes, w.n_vfm);
    let pca = fit_feature_pca(&terrain, &features, w.pca_samples, w.n_pca, w.seed ^ PCA_SEED_SALT)?;
    Ok(Scenario { terrain, params: true_param_set(), features, pca })
}

/// Accepts either the world directory (containing `world.txt`) or a direct
/// path to the file.
pub fn load_world(path: &str) -> Result<(WorldParams, Scenario), TdError> {
    let p = PathBuf::from(path);
    let file = if p.is_dir() { p.join("world.txt") } else { p };
    let doc = KvDoc::read(&file)?;
    let w = WorldParams::from_world_doc(&doc)?;
    let scn = build_scenario(&w)?;
    Ok((w, scn))
}

fn ensure_out(out: &str) -> Result<PathBuf, TdError> {
    let dir = PathBuf::from(out);
    std::fs::create_dir_all(&dir).map_err(|e| TdError::io(&dir, e))?;
    Ok(dir)
}

fn finish(dir: &Path, command: &str, lines: &[String]) -> Result<(), TdError> {
    let mut log = format!("command = {command}\n");
    for l in lines {
        log.push_str(l);
        log.push('\n');
    }
    log.push_str("status = ok\n");
    write_text(&dir.join("run.log"), &log)
}

pub fn run_genworld(p: &WorldParams) -> Result<(), TdError> {
    let dir = ensure_out(require_path(&p.out, "out")?)?;
    p.to_doc().write(&dir.join("config.txt"))?;
    let scn = build_scenario(p)?;
    p.world_doc().write(&dir.join("world.txt"))?;

    // Coarse elevation sweep as a sanity record; probe deterministically.
    let half = p.extent * 0.4;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let n = 25;
    for i in 0..n {
        for j in 0..n {
            let x = -half + 2.0 * half * i as f64 / (n - 1) as f64;
            let y = -half + 2.0 * half * j as f64 / (n - 1) as f64;
            let e = scn.terrain.elevation(x, y);
            lo = lo.min(e);
            hi = hi.max(e);
        }
    }
    let lines = vec![
        "artifact = world.txt".into(),
        "artifact = config.txt".into(),
        format!("elevation.min = {lo}"),
        format!("elevation.max = {hi}"),
        format!("pca = {} -> {}", p.n_vfm, scn.pca.n_pca),
    ];
    println!("world written to {}: elevation range [{lo:.2}, {hi:.2}] m", dir.display());
    finish(&dir, "genworld", &lines)
}

pub fn run_dataset(p: &DatasetParams) -> Result<(), TdError> {
    let (_, scn) = load_world(require_path(&p.world, "world")?)?;
    let dir = ensure_out(require_path(&p.out, "out")?)?;
    p.to_doc().write(&dir.join("config.txt"))?;

    let shards = generate_logs(&scn, p.logs, p.duration, p.seed);
    let chunks = ChunkSpec {
        horizon_steps: p.horizon_steps,
        tau_steps: p.tau_steps,
        stride_steps: p.stride_steps,
    };
    let ds = extract_dataset(shards, chunks, p.train_frac);
    if ds.train.is_empty() {
        return Err(TdError::Config(format!(
            "no training windows: {} logs x {} s leave fewer than {} rows before the split",
            p.logs,
            p.duration,
            chunks.window_rows()
        )));
    }
    ds.save(&dir)?;

    let mut valid = [0u64; N_BUCKETS];
    let mut total = [0u64; N_BUCKETS];
    for shard in &ds.shards {
        for (i, &v) in shard.validity.iter().enumerate() {
            let b = i % shard.n_buckets;
            total[b] += 1;
            if v == 1 {
                valid[b] += 1;
            }
        }
    }
    let mut lines = vec![
        format!("shards = {}", ds.shards.len()),
        format!("train_samples = {}", ds.train.len()),
        format!("test_samples = {}", ds.test.len()),
    ];
    for b in 0..N_BUCKETS {
        let frac = valid[b] as f64 / total[b].max(1) as f64;
        lines.push(format!("validity.{} = {frac}", BUCKET_LABELS[b]));
    }
    println!(
        "dataset written to {}: {} train / {} test windows from {} logs",
        dir.display(),
        ds.train.len(),
        ds.test.len(),
        ds.shards.len()
    );
    finish(&dir, "dataset", &lines)
}

pub fn training_config(p: &TrainParams) -> Result<TrainingConfig, TdError> {
    let mut cfg = TrainingConfig::new(FeatureMode::parse(&p.mode)?, DistanceMode::parse(&p.distance)?);
    cfg.epochs = p.epochs;
    cfg.batch_size = p.batch_size;
    cfg.lr = p.lr;
    cfg.physics_lr_mult = p.physics_lr_mult;
    cfg.loss_weights = parse_fixed::<6>(&p.loss_weights, "loss_weights")?;
    cfg.n_pca = p.n_pca;
    cfg.n_encoder = p.n_encoder;
    cfg.tbptt_steps = if p.tbptt_steps == 0 { None } else { Some(p.tbptt_steps) };
    cfg.seed = p.seed;
    cfg.delay_fit = DelayFitConfig {
        epochs: p.delay_epochs,
        segments_per_epoch: p.delay_segments,
        segment_steps: p.delay_segment_steps,
        batch_size: p.delay_batch,
        lr: p.delay_lr,
        seed: p.delay_seed,
    };
    Ok(cfg)
}

fn metrics_text(delay: &[f64], joint: &[f64]) -> String {
    let mut s = String::from("phase\tepoch\tloss\n");
    for (i, v) in delay.iter().enumerate() {
        s.push_str(&format!("delay\t{i}\t{v}\n"));
    }
    for (i, v) in joint.iter().enumerate() {
        s.push_str(&format!("joint\t{i}\t{v}\n"));
    }
    s
}

pub fn run_train(p: &TrainParams) -> Result<(), TdError> {
    let ds = Dataset::load(Path::new(require_path(&p.dataset, "dataset")?))?;
    let dir = ensure_out(require_path(&p.out, "out")?)?;
    p.to_doc().write(&dir.join("config.txt"))?;
    let cfg = training_config(p)?;

    let mut lines = vec!["artifact = model.bin".into(), "artifact = metrics.tsv".into()];
    if cfg.epochs == 0 {
        // Degenerate config: emit the untouched initialization and an
        // empty loss curve instead of running either fitting stage.
        let shard0 = &ds.shards[0];
        let mut spec = HybridSpec::new(cfg.feature_mode, cfg.n_pca, cfg.n_encoder);
        spec.dt = shard0.dt;
        spec.tau_steps = ds.chunks.tau_steps;
        spec.horizon_steps = ds.chunks.horizon_steps;
        let model = HybridModel::new(spec, cfg.seed)?;
        model.save(&dir.join("model.bin"))?;
        write_text(&dir.join("metrics.tsv"), &metrics_text(&[], &[]))?;
        lines.push("note = zero epochs, initialized weights emitted".into());
        println!("wrote initialized model to {} (0 epochs)", dir.display());
        return finish(&dir, "train", &lines);
    }

    let outcome = train(&ds, &cfg)?;
    outcome.model.save(&dir.join("model.bin"))?;
    write_text(&dir.join("metrics.tsv"), &metrics_text(&outcome.delay_curve, &outcome.epoch_losses))?;
    if outcome.dead_params.is_empty() {
        lines.push("dead_params = none".into());
    } else {
        let joined = outcome.dead_params.join(",");
        lines.push(format!("dead_params = {joined}"));
        eprintln!("warning: parameter blocks with no gradient in epoch 0: {joined}");
    }
    for (i, v) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {i}: loss {v:.6}");
    }
    println!("model written to {}", dir.display());
    finish(&dir, "train", &lines)
}

fn parse_buckets(s: &str) -> Result<Vec<usize>, TdError> {
    let v = parse_usize_list(s, "buckets")?;
    for &b in &v {
        if b >= N_BUCKETS {
            return Err(TdError::Config(format!("bucket {b} out of range 0..{N_BUCKETS}")));
        }
    }
    if v.is_empty() {
        return Err(TdError::Config("buckets must name at least one bucket".into()));
    }
    Ok(v)
}

fn reports_tsv(rows: &[(String, EvalReport)]) -> String {
    let mut s =
        String::from("label\tbucket\tn\tmean\tmedian\tq1\tq3\twhisker_lo\twhisker_hi\tvx_mae\n");
    for (label, r) in rows {
        s.push_str(&format!(
            "{label}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.bucket,
            r.errors.len(),
            r.mean,
            r.median,
            r.q1,
            r.q3,
            r.whisker_lo,
            r.whisker_hi,
            r.endpoint_state_mae[3],
        ));
    }
    s
}

pub fn run_eval(p: &EvalParams) -> Result<(), TdError> {
    let buckets = parse_buckets(&p.buckets)?;
    let ds = Dataset::load(Path::new(require_path(&p.dataset, "dataset")?))?;
    let model = HybridModel::load(Path::new(require_path(&p.model, "model")?))?;
    let dir = ensure_out(require_path(&p.out, "out")?)?;
    p.to_doc().write(&dir.join("config.txt"))?;

    let mut rows = Vec::with_capacity(buckets.len());
    for &b in &buckets {
        rows.push((BUCKET_LABELS[b].to_string(), evaluate(&model, &ds, b)?));
    }

    let table = format_reports(&rows);
    write_text(&dir.join("reports.txt"), &table)?;
    write_text(&dir.join("reports.tsv"), &reports_tsv(&rows))?;

    let mut summary = KvDoc::new();
    summary.set("n_reports", rows.len());
    for (label, r) in &rows {
        r.to_kv(&mut summary, label);
    }
    summary.write(&dir.join("summary.txt"))?;

    let mut blob = TensorBlob::default();
    blob.meta.insert("kind".into(), "eval-errors".into());
    for (label, r) in &rows {
        blob.push(&format!("errors_{label}"), r.errors.len(), 1, r.errors.clone());
        blob.push(&format!("state_mae_{label}"), 1, 6, r.endpoint_state_mae.to_vec());
    }
    blob.write(&dir.join("errors.bin"))?;

    print!("{table}");
    let lines = vec![
        "artifact = reports.txt".into(),
        "artifact = reports.tsv".into(),
        "artifact = summary.txt".into(),
        "artifact = errors.bin".into(),
    ];
    finish(&dir, "eval", &lines)
}

fn ablation_tsv(rows: &[terradyn::train::AblationRow]) -> String {
    let mut s = String::from("label\tn_pca\tn_encoder\tn\tmean\tmedian\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.label,
            r.n_pca,
            r.n_encoder,
            r.report.errors.len(),
            r.report.mean,
            r.report.median,
        ));
    }
    s
}

pub fn run_ablate(p: &AblateParams) -> Result<(), TdError> {
    let ds = Dataset::load(Path::new(require_path(&p.dataset, "dataset")?))?;
    let dir = ensure_out(require_path(&p.out, "out")?)?;
    p.to_doc().write(&dir.join("config.txt"))?;

    let axis = match p.axis.as_str() {
        "encoder" => AblationAxis::CompressionSize,
        "pca" => AblationAxis::NPca,
        other => {
            return Err(TdError::Config(format!("unknown axis {other:?}, expected encoder or pca")))
        }
    };
    let values = parse_usize_list(&p.values, "values")?;
    if values.is_empty() {
        return Err(TdError::Config("values must name at least one size".into()));
    }
    let base = training_config(&p.train)?;
    base.validate()?;

    let rows = ablation_sweep(&ds, &base, axis, &values)?;
    let labelled: Vec<(String, EvalReport)> =
        rows.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
    let table = format_reports(&labelled);
    write_text(&dir.join("ablation.txt"), &table)?;
    write_text(&dir.join("ablation.tsv"), &ablation_tsv(&rows))?;
    print!("{table}");

    let lines = vec!["artifact = ablation.txt".into(), "artifact = ablation.tsv".into()];
    finish(&dir, "ablate", &lines)
}

fn planner_config(p: &PlanParams) -> Result<PlannerConfig, TdError> {
    let cfg = PlannerConfig {
        n_samples: p.n_samples,
        horizon_steps: p.horizon_steps,
        noise_scale: parse_fixed::<3>(&p.noise, "noise")?,
        lambda: p.lambda,
        w_goal: p.w_goal,
        w_invalid: p.w_invalid,
        w_effort: p.w_effort,
        seed: p.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_plan(p: &PlanParams) -> Result<(), TdError> {
    let (_, scn) = load_world(require_path(&p.world, "world")?)?;
    let model = HybridModel::load(Path::new(require_path(&p.model, "model")?))?;
    let dir = ensure_out(require_path(&p.out, "out")?)?;
    p.to_doc().write(&dir.join("config.txt"))?;

    let goal = parse_fixed::<2>(&p.goal, "goal")?;
    let start3 = parse_fixed::<3>(&p.start, "start")?;
    let extent = parse_fixed::<3>(&p.map_extent, "map_extent")?;
    let mut start = VehicleState::zero();
    start.p_x = start3[0];
    start.p_y = start3[1];
    start.phi = start3[2];
    let dcfg = DriveConfig {
        planner: planner_config(p)?,
        replan_interval: p.replan_interval,
        max_steps: p.max_steps,
        goal_radius: p.goal_radius,
        obs_radius: p.obs_radius,
        map_resolution: p.map_resolution,
        map_extent: extent,
    };

    // One standing plan from the start state, exported in the trajectory
    // format: the chosen rollout plus a few of its noisy samples.
    let (_, tfm, history, act) = prepare_start(&model, &scn, &start, &dcfg)?;
    let pmap = PlannerMap::new(&model, &tfm)?;
    let nominal = vec![ControlInput::new(0.0, 0.0, 0.0); dcfg.planner.horizon_steps];
    let outcome = plan(&model, &pmap, &history, &start, &act, &nominal, goal, &dcfg.planner)?;
    save_plan(&model, &pmap, &history, &start, &act, &outcome, &dir.join("plan.traj"))?;
    let n_export = p.export_samples.min(dcfg.planner.n_samples.saturating_sub(1));
    for k in 1..=n_export {
        let eps = sample_noise(&dcfg.planner, k, dcfg.planner.horizon_steps);
        let controls = perturbed(&nominal, &eps);
        let traj = rollout_to_trajectory(&model, &pmap, &history, &start, &act, &controls)?;
        traj.save(&dir.join(format!("sample_{k}.traj")))?;
    }

    let drive = receding_horizon_drive(&model, &scn, start, goal, &dcfg)?;

    let mut doc = KvDoc::new();
    doc.set("reached", drive.reached);
    doc.set("steps", drive.steps);
    doc.set_f64("time_s", drive.time_s);
    doc.set_f64("tracking_error", drive.tracking_error);
    doc.set_f64("goal_distance", drive.goal_distance);
    if let Some(last) = drive.states.last() {
        doc.set_f64("end_x", last.p_x);
        doc.set_f64("end_y", last.p_y);
    }
    doc.write(&dir.join("drive.txt"))?;

    let n = drive.states.len();
    let mut blob = TensorBlob::default();
    blob.meta.insert("kind".into(), "drive".into());
    blob.push(
        "states",
        n,
        6,
        drive.states.iter().flat_map(|s| s.to_array()).collect(),
    );
    blob.push(
        "controls",
        n,
        3,
        drive.controls.iter().flat_map(|u| u.to_array()).collect(),
    );
    blob.write(&dir.join("drive.bin"))?;

    println!(
        "drive: reached={} steps={} goal_distance={:.2} m tracking_error={:.3} m",
        drive.reached, drive.steps, drive.goal_distance, drive.tracking_error
    );
    let mut lines = vec![
        "artifact = plan.traj".into(),
        "artifact = drive.txt".into(),
        "artifact = drive.bin".into(),
    ];
    for k in 1..=n_export {
        lines.push(format!("artifact = sample_{k}.traj"));
    }
    lines.push(format!("reached = {}", drive.reached));
    finish(&dir, "plan", &lines)
}
