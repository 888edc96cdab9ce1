//! Resolved run parameters for every subcommand.
//!
//! Each command resolves its parameters in three layers with rising
//! precedence: built-in defaults, a key-value config file, then explicit
//! command-line flags. The resolved set is written next to the outputs as
//! `config.txt`; rerunning a command from that snapshot reproduces the run
//! byte for byte.

use terradyn::io::KvDoc;
use terradyn::TdError;

pub fn opt_f64(doc: &KvDoc, key: &str, slot: &mut f64) -> Result<(), TdError> {
    if doc.get(key).is_some() {
        *slot = doc.get_f64(key)?;
    }
    Ok(())
}

pub fn opt_usize(doc: &KvDoc, key: &str, slot: &mut usize) -> Result<(), TdError> {
    if doc.get(key).is_some() {
        *slot = doc.get_usize(key)?;
    }
    Ok(())
}

pub fn opt_u64(doc: &KvDoc, key: &str, slot: &mut u64) -> Result<(), TdError> {
    if doc.get(key).is_some() {
        *slot = doc.get_u64(key)?;
    }
    Ok(())
}

pub fn opt_string(doc: &KvDoc, key: &str, slot: &mut String) {
    if let Some(v) = doc.get(key) {
        *slot = v.to_string();
    }
}

fn opt_path(doc: &KvDoc, key: &str, slot: &mut Option<String>) {
    if let Some(v) = doc.get(key) {
        *slot = Some(v.to_string());
    }
}

pub fn parse_f64_list(s: &str, key: &str) -> Result<Vec<f64>, TdError> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| TdError::Config(format!("{key}: expected comma-separated numbers, got {s:?}")))
}

pub fn parse_usize_list(s: &str, key: &str) -> Result<Vec<usize>, TdError> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| {
            TdError::Config(format!("{key}: expected comma-separated integers, got {s:?}"))
        })
}

pub fn parse_fixed<const N: usize>(s: &str, key: &str) -> Result<[f64; N], TdError> {
    let v = parse_f64_list(s, key)?;
    v.try_into()
        .map_err(|_| TdError::Config(format!("{key}: expected {N} comma-separated numbers")))
}

/// Require a path that must have been supplied by flag or config file.
pub fn require_path<'a>(slot: &'a Option<String>, key: &str) -> Result<&'a str, TdError> {
    slot.as_deref()
        .ok_or_else(|| TdError::Config(format!("missing {key}: pass --{key} or set it in --config")))
}

fn check_command(doc: &KvDoc, expected: &str) -> Result<(), TdError> {
    if let Some(cmd) = doc.get("command") {
        if cmd != expected {
            return Err(TdError::Config(format!(
                "config file is a snapshot of `{cmd}`, not `{expected}`"
            )));
        }
    }
    Ok(())
}

/// World-generation parameters; `world.txt` written by genworld carries the
/// same keys so later stages can rebuild the scenario deterministically.
#[derive(Clone, Debug)]
pub struct WorldParams {
    pub out: Option<String>,
    pub seed: u64,
    pub extent: f64,
    pub classes: usize,
    pub sharpness: f64,
    pub steepness: f64,
    pub residual_scale: f64,
    pub n_vfm: usize,
    pub n_pca: usize,
    pub pca_samples: usize,
    pub workers: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            out: None,
            seed: 0,
            extent: 200.0,
            classes: 6,
            sharpness: 2.5,
            steepness: 1.0,
            residual_scale: 1.0,
            n_vfm: 384,
            n_pca: 40,
            pca_samples: 3000,
            workers: 0,
        }
    }
}

impl WorldParams {
    pub fn overlay_doc(&mut self, doc: &KvDoc) -> Result<(), TdError> {
        check_command(doc, "genworld")?;
        opt_path(doc, "out", &mut self.out);
        opt_u64(doc, "seed", &mut self.seed)?;
        opt_f64(doc, "extent", &mut self.extent)?;
        opt_usize(doc, "classes", &mut self.classes)?;
        opt_f64(doc, "sharpness", &mut self.sharpness)?;
        opt_f64(doc, "steepness", &mut self.steepness)?;
        opt_f64(doc, "residual_scale", &mut self.residual_scale)?;
        opt_usize(doc, "n_vfm", &mut self.n_vfm)?;
        opt_usize(doc, "n_pca", &mut self.n_pca)?;
        opt_usize(doc, "pca_samples", &mut self.pca_samples)?;
        opt_usize(doc, "workers", &mut self.workers)?;
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("command", "genworld");
        if let Some(out) = &self.out {
            doc.set("out", out);
        }
        doc.set("seed", self.seed);
        doc.set_f64("extent", self.extent);
        doc.set("classes", self.classes);
        doc.set_f64("sharpness", self.sharpness);
        doc.set_f64("steepness", self.steepness);
        doc.set_f64("residual_scale", self.residual_scale);
        doc.set("n_vfm", self.n_vfm);
        doc.set("n_pca", self.n_pca);
        doc.set("pca_samples", self.pca_samples);
        doc.set("workers", self.workers);
        doc
    }

    /// The scenario-rebuilding subset, written as `world.txt`. Stages that
    /// consume a world overlay this into their own WorldParams.
    pub fn world_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("kind", "world");
        doc.set("seed", self.seed);
        doc.set_f64("extent", self.extent);
        doc.set("classes", self.classes);
        doc.set_f64("sharpness", self.sharpness);
        doc.set_f64("steepness", self.steepness);
        doc.set_f64("residual_scale", self.residual_scale);
        doc.set("n_vfm", self.n_vfm);
        doc.set("n_pca", self.n_pca);
        doc.set("pca_samples", self.pca_samples);
        doc
    }

    pub fn from_world_doc(doc: &KvDoc) -> Result<WorldParams, TdError> {
        match doc.get("kind") {
            Some("world") => {}
            _ => return Err(TdError::Config("not a world file: missing kind = world".into())),
        }
        let mut p = WorldParams::default();
        opt_u64(doc, "seed", &mut p.seed)?;
        opt_f64(doc, "extent", &mut p.extent)?;
        opt_usize(doc, "classes", &mut p.classes)?;
        opt_f64(doc, "sharpness", &mut p.sharpness)?;
        opt_f64(doc, "steepness", &mut p.steepness)?;
        opt_f64(doc, "residual_scale", &mut p.residual_scale)?;
        opt_usize(doc, "n_vfm", &mut p.n_vfm)?;
        opt_usize(doc, "n_pca", &mut p.n_pca)?;
        opt_usize(doc, "pca_samples", &mut p.pca_samples)?;
        Ok(p)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetParams {
    pub world: Option<String>,
    pub out: Option<String>,
    pub logs: usize,
    pub duration: f64,
    pub train_frac: f64,
    pub seed: u64,
    pub horizon_steps: usize,
    pub tau_steps: usize,
    pub stride_steps: usize,
    pub workers: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            world: None,
            out: None,
            logs: 8,
            duration: 90.0,
            train_frac: 0.8,
            seed: 100,
            horizon_steps: 250,
            tau_steps: 10,
            stride_steps: 50,
            workers: 0,
        }
    }
}

impl DatasetParams {
    pub fn overlay_doc(&mut self, doc: &KvDoc) -> Result<(), TdError> {
        check_command(doc, "dataset")?;
        opt_path(doc, "world", &mut self.world);
        opt_path(doc, "out", &mut self.out);
        opt_usize(doc, "logs", &mut self.logs)?;
        opt_f64(doc, "duration", &mut self.duration)?;
        opt_f64(doc, "train_frac", &mut self.train_frac)?;
        opt_u64(doc, "seed", &mut self.seed)?;
        opt_usize(doc, "horizon_steps", &mut self.horizon_steps)?;
        opt_usize(doc, "tau_steps", &mut self.tau_steps)?;
        opt_usize(doc, "stride_steps", &mut self.stride_steps)?;
        opt_usize(doc, "workers", &mut self.workers)?;
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("command", "dataset");
        if let Some(world) = &self.world {
            doc.set("world", world);
        }
        if let Some(out) = &self.out {
            doc.set("out", out);
        }
        doc.set("logs", self.logs);
        doc.set_f64("duration", self.duration);
        doc.set_f64("train_frac", self.train_frac);
        doc.set("seed", self.seed);
        doc.set("horizon_steps", self.horizon_steps);
        doc.set("tau_steps", self.tau_steps);
        doc.set("stride_steps", self.stride_steps);
        doc.set("workers", self.workers);
        doc
    }
}

#[derive(Clone, Debug)]
pub struct TrainParams {
    pub dataset: Option<String>,
    pub out: Option<String>,
    pub mode: String,
    pub distance: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub physics_lr_mult: f64,
    pub loss_weights: String,
    pub n_pca: usize,
    pub n_encoder: usize,
    pub tbptt_steps: usize,
    pub seed: u64,
    pub delay_epochs: usize,
    pub delay_segments: usize,
    pub delay_segment_steps: usize,
    pub delay_batch: usize,
    pub delay_lr: f64,
    pub delay_seed: u64,
    pub workers: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            dataset: None,
            out: None,
            mode: "compressed".into(),
            distance: "hindsight".into(),
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            physics_lr_mult: 0.1,
            loss_weights: "1,1,2,1,1,1".into(),
            n_pca: 40,
            n_encoder: 4,
            tbptt_steps: 0,
            seed: 0,
            delay_epochs: 30,
            delay_segments: 160,
            delay_segment_steps: 25,
            delay_batch: 8,
            delay_lr: 0.05,
            delay_seed: 7,
            workers: 0,
        }
    }
}

impl TrainParams {
    pub fn overlay_doc(&mut self, doc: &KvDoc) -> Result<(), TdError> {
        check_command(doc, "train")?;
        self.overlay_shared(doc)?;
        opt_path(doc, "dataset", &mut self.dataset);
        opt_path(doc, "out", &mut self.out);
        opt_string(doc, "mode", &mut self.mode);
        Ok(())
    }

    /// Training knobs shared with the ablation command.
    pub fn overlay_shared(&mut self, doc: &KvDoc) -> Result<(), TdError> {
        opt_string(doc, "distance", &mut self.distance);
        opt_usize(doc, "epochs", &mut self.epochs)?;
        opt_usize(doc, "batch_size", &mut self.batch_size)?;
        opt_f64(doc, "lr", &mut self.lr)?;
        opt_f64(doc, "physics_lr_mult", &mut self.physics_lr_mult)?;
        opt_string(doc, "loss_weights", &mut self.loss_weights);
        opt_usize(doc, "n_pca", &mut self.n_pca)?;
        opt_usize(doc, "n_encoder", &mut self.n_encoder)?;
        opt_usize(doc, "tbptt_steps", &mut self.tbptt_steps)?;
        opt_u64(doc, "seed", &mut self.seed)?;
        opt_usize(doc, "delay_epochs", &mut self.delay_epochs)?;
        opt_usize(doc, "delay_segments", &mut self.delay_segments)?;
        opt_usize(doc, "delay_segment_steps", &mut self.delay_segment_steps)?;
        opt_usize(doc, "delay_batch", &mut self.delay_batch)?;
        opt_f64(doc, "delay_lr", &mut self.delay_lr)?;
        opt_u64(doc, "delay_seed", &mut self.delay_seed)?;
        opt_usize(doc, "workers", &mut self.workers)?;
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("command", "train");
        if let Some(dataset) = &self.dataset {
            doc.set("dataset", dataset);
        }
        if let Some(out) = &self.out {
            doc.set("out", out);
        }
        doc.set("mode", &self.mode);
        self.shared_to_doc(&mut doc);
        doc
    }

    pub fn shared_to_doc(&self, doc: &mut KvDoc) {
        doc.set("distance", &self.distance);
        doc.set("epochs", self.epochs);
        doc.set("batch_size", self.batch_size);
        doc.set_f64("lr", self.lr);
        doc.set_f64("physics_lr_mult", self.physics_lr_mult);
        doc.set("loss_weights", &self.loss_weights);
        doc.set("n_pca", self.n_pca);
        doc.set("n_encoder", self.n_encoder);
        doc.set("tbptt_steps", self.tbptt_steps);
        doc.set("seed", self.seed);
        doc.set("delay_epochs", self.delay_epochs);
        doc.set("delay_segments", self.delay_segments);
        doc.set("delay_segment_steps", self.delay_segment_steps);
        doc.set("delay_batch", self.delay_batch);
        doc.set_f64("delay_lr", self.delay_lr);
        doc.set("delay_seed", self.delay_seed);
        doc.set("workers", self.workers);
    }
}

#[derive(Clone, Debug)]
pub struct EvalParams {
    pub dataset: Option<String>,
    pub model: Option<String>,
    pub out: Option<String>,
    pub buckets: String,
    pub workers: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            dataset: None,
            model: None,
            out: None,
            buckets: "0,1,2,3,4,5,6,7".into(),
            workers: 0,
        }
    }
}

impl EvalParams {
    pub fn overlay_doc(&mut self, doc: &KvDoc) -> Result<(), TdError> {
        check_command(doc, "eval")?;
        opt_path(doc, "dataset", &mut self.dataset);
        opt_path(doc, "model", &mut self.model);
        opt_path(doc, "out", &mut self.out);
        opt_string(doc, "buckets", &mut self.buckets);
        opt_usize(doc, "workers", &mut self.workers)?;
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("command", "eval");
        if let Some(dataset) = &self.dataset {
            doc.set("dataset", dataset);
        }
        if let Some(model) = &self.model {
            doc.set("model", model);
        }
        if let Some(out) = &self.out {
            doc.set("out", out);
        }
        doc.set("buckets", &self.buckets);
        doc.set("workers", self.workers);
        doc
    }
}

#[derive(Clone, Debug)]
pub struct AblateParams {
    pub dataset: Option<String>,
    pub out: Option<String>,
    pub axis: String,
    pub values: String,
    pub train: TrainParams,
}

impl Default for AblateParams {
    fn default() -> Self {
        AblateParams {
            dataset: None,
            out: None,
            axis: "encoder".into(),
            values: "2,4,8,16".into(),
            train: TrainParams::default(),
        }
    }
}

impl AblateParams {
    pub fn overlay_doc(&mut self, doc: &KvDoc) -> Result<(), TdError> {
        check_command(doc, "ablate")?;
        opt_path(doc, "dataset", &mut self.dataset);
        opt_path(doc, "out", &mut self.out);
        opt_string(doc, "axis", &mut self.axis);
        opt_string(doc, "values", &mut self.values);
        self.train.overlay_shared(doc)?;
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("command", "ablate");
        if let Some(dataset) = &self.dataset {
            doc.set("dataset", dataset);
        }
        if let Some(out) = &self.out {
            doc.set("out", out);
        }
        doc.set("axis", &self.axis);
        doc.set("values", &self.values);
        self.train.shared_to_doc(&mut doc);
        doc
    }
}

#[derive(Clone, Debug)]
pub struct PlanParams {
    pub world: Option<String>,
    pub model: Option<String>,
    pub out: Option<String>,
    pub goal: String,
    pub start: String,
    pub n_samples: usize,
    pub horizon_steps: usize,
    pub noise: String,
    pub lambda: f64,
    pub w_goal: f64,
    pub w_invalid: f64,
    pub w_effort: f64,
    pub seed: u64,
    pub replan_interval: usize,
    pub max_steps: usize,
    pub goal_radius: f64,
    pub obs_radius: f64,
    pub map_resolution: f64,
    pub map_extent: String,
    pub export_samples: usize,
    pub workers: usize,
}

impl Default for PlanParams {
    fn default() -> Self {
        PlanParams {
            world: None,
            model: None,
            out: None,
            goal: "20,0".into(),
            start: "0,0,0".into(),
            n_samples: 256,
            horizon_steps: 250,
            noise: "0.25,0.15,0.3".into(),
            lambda: 20.0,
            w_goal: 1.0,
            w_invalid: 0.1,
            w_effort: 0.01,
            seed: 0,
            replan_interval: 5,
            max_steps: 3000,
            goal_radius: 2.0,
            obs_radius: 30.0,
            map_resolution: 1.0,
            map_extent: "80,80,12".into(),
            export_samples: 3,
            workers: 0,
        }
    }
}

impl PlanParams {
    pub fn overlay_doc(&mut self, doc: &KvDoc) -> Result<(), TdError> {
        check_command(doc, "plan")?;
        opt_path(doc, "world", &mut self.world);
        opt_path(doc, "model", &mut self.model);
        opt_path(doc, "out", &mut self.out);
        opt_string(doc, "goal", &mut self.goal);
        opt_string(doc, "start", &mut self.start);
        opt_usize(doc, "n_samples", &mut self.n_samples)?;
        opt_usize(doc, "horizon_steps", &mut self.horizon_steps)?;
        opt_string(doc, "noise", &mut self.noise);
        opt_f64(doc, "lambda", &mut self.lambda)?;
        opt_f64(doc, "w_goal", &mut self.w_goal)?;
        opt_f64(doc, "w_invalid", &mut self.w_invalid)?;
        opt_f64(doc, "w_effort", &mut self.w_effort)?;
        opt_u64(doc, "seed", &mut self.seed)?;
        opt_usize(doc, "replan_interval", &mut self.replan_interval)?;
        opt_usize(doc, "max_steps", &mut self.max_steps)?;
        opt_f64(doc, "goal_radius", &mut self.goal_radius)?;
        opt_f64(doc, "obs_radius", &mut self.obs_radius)?;
        opt_f64(doc, "map_resolution", &mut self.map_resolution)?;
        opt_string(doc, "map_extent", &mut self.map_extent);
        opt_usize(doc, "export_samples", &mut self.export_samples)?;
        opt_usize(doc, "workers", &mut self.workers)?;
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("command", "plan");
        if let Some(world) = &self.world {
            doc.set("world", world);
        }
        if let Some(model) = &self.model {
            doc.set("model", model);
        }
        if let Some(out) = &self.out {
            doc.set("out", out);
        }
        doc.set("goal", &self.goal);
        doc.set("start", &self.start);
        doc.set("n_samples", self.n_samples);
        doc.set("horizon_steps", self.horizon_steps);
        doc.set("noise", &self.noise);
        doc.set_f64("lambda", self.lambda);
        doc.set_f64("w_goal", self.w_goal);
        doc.set_f64("w_invalid", self.w_invalid);
        doc.set_f64("w_effort", self.w_effort);
        doc.set("seed", self.seed);
        doc.set("replan_interval", self.replan_interval);
        doc.set("max_steps", self.max_steps);
        doc.set_f64("goal_radius", self.goal_radius);
        doc.set_f64("obs_radius", self.obs_radius);
        doc.set_f64("map_resolution", self.map_resolution);
        doc.set("map_extent", &self.map_extent);
        doc.set("export_samples", self.export_samples);
        doc.set("workers", self.workers);
        doc
    }
}
