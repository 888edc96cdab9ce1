//! Two-stage training for the hybrid model, plus evaluation reports and
//! ablation sweeps.
//!
//! Stage 1 fits the actuator delay constants alone against recorded actuator
//! transitions; they are frozen afterwards. Stage 2 trains the full parameter
//! vector (physics constants at a reduced learning rate together with the
//! network weights) on whole prediction windows: roll the model forward,
//! penalize the weighted squared state error at every step, backpropagate
//! through the rollout. Feature buckets are chosen per trajectory, either
//! always the hindsight bucket or uniformly at random per epoch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::TdError;
use crate::features::N_WHEELS;
use crate::hybrid::{
    rollout_teacher_f64, rollout_teacher_tape_chunk, FeatureMode, HybridModel, HybridSpec,
    TapeCarry, TeacherWindow,
};
use crate::io::KvDoc;
use crate::nn::{AdamConfig, AdamState};
use crate::tape::{wrap_pi, Tape, Var};
use crate::vehicle::{step_actuators, ActuatorState, DelayParams, ParamSet, VehicleState};
use crate::world::Dataset;

/// Weights for the squared actuator-tracking error in the delay fit, chosen
/// so each channel contributes at a comparable scale: brake pressure is
/// already O(1), steer angle is a fraction of a radian, steer rate a few
/// rad/s, engine speed O(1000) rpm.
const DELAY_CHANNEL_SCALE: [f64; 4] = [1.0, 4.0, 0.5, 1e-3];

/// Floor for the per-parameter step scale in the delay fit, so parameters
/// initialized near zero can still move.
const DELAY_SCALE_FLOOR: f64 = 0.01;

/// Configuration for the stage-1 actuator delay fit.
#[derive(Clone, Debug)]
pub struct DelayFitConfig {
    pub epochs: usize,
    pub segments_per_epoch: usize,
    pub segment_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DelayFitConfig {
    fn default() -> Self {
        DelayFitConfig {
            epochs: 30,
            segments_per_epoch: 160,
            segment_steps: 25,
            batch_size: 8,
            lr: 0.05,
            seed: 7,
        }
    }
}

/// Fit the eight actuator delay constants by teacher-forced rollouts of the
/// actuator model over short recorded segments. Controls and longitudinal
/// speed come from the log; only the actuator states are simulated. Returns
/// the fitted constants and the per-epoch mean segment loss.
pub fn fit_delay(ds: &Dataset, cfg: &DelayFitConfig) -> Result<(DelayParams<f64>, Vec<f64>), TdError> {
    if ds.train.is_empty() {
        return Err(TdError::Config("delay fit needs a non-empty train split".into()));
    }
    if cfg.segment_steps + 1 > ds.chunks.window_rows() {
        return Err(TdError::Config(format!(
            "segment_steps {} does not fit in a {}-row window",
            cfg.segment_steps,
            ds.chunks.window_rows()
        )));
    }
    if cfg.epochs == 0 || cfg.segments_per_epoch == 0 || cfg.batch_size == 0 {
        return Err(TdError::Config("delay fit epochs, segments, batch must be positive".into()));
    }

    let init = ParamSet::fit_init();
    let max_steer = init.max_steer;
    let mut theta = init.delay.to_vec();
    let lr_scale: Vec<f64> = theta.iter().map(|p| p.abs().max(DELAY_SCALE_FLOOR)).collect();
    let mut adam = AdamState::new(theta.len(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let window = ds.chunks.window_rows();
    let max_offset = window - cfg.segment_steps - 1;
    let n_batches = cfg.segments_per_epoch.div_ceil(cfg.batch_size);
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_segments = 0usize;
        for batch in 0..n_batches {
            let tape = Tape::with_capacity(64 * cfg.batch_size * cfg.segment_steps, 1024);
            let delay_theta = tape.param_slice(&theta, 0, theta.len());
            let dl = DelayParams::from_slice(&(0..theta.len()).map(|i| delay_theta.at(i)).collect::<Vec<_>>());
            let mut loss = tape.constant(0.0);
            for _ in 0..cfg.batch_size {
                let sr = ds.train[rng.random_range(0..ds.train.len())];
                let offset = rng.random_range(0..=max_offset);
                let shard = &ds.shards[sr.shard];
                let start = sr.row + offset;
                let a0 = shard.actuators[start];
                let mut act = ActuatorState::<Var> {
                    brake_pressure: tape.constant(a0[0]),
                    steer_angle: tape.constant(a0[1]),
                    steer_rate: tape.constant(a0[2]),
                    engine_rpm: tape.constant(a0[3]),
                };
                for s in 0..cfg.segment_steps {
                    let row = start + s;
                    let control = crate::vehicle::ControlInput {
                        throttle: shard.controls[row][0],
                        brake_cmd: shard.controls[row][1],
                        steer_cmd: shard.controls[row][2],
                    };
                    let v_x = tape.constant(shard.states[row][3]);
                    act = step_actuators(&act, &control, v_x, &dl, max_steer, shard.dt);
                    let tgt = shard.actuators[row + 1];
                    let db = (act.brake_pressure - tgt[0]) * DELAY_CHANNEL_SCALE[0];
                    let da = (act.steer_angle - tgt[1]) * DELAY_CHANNEL_SCALE[1];
                    let dr = (act.steer_rate - tgt[2]) * DELAY_CHANNEL_SCALE[2];
                    let dn = (act.engine_rpm - tgt[3]) * DELAY_CHANNEL_SCALE[3];
                    loss = loss + db.square() + da.square() + dr.square() + dn.square();
                }
            }
            let batch_loss = loss.value() / cfg.batch_size as f64;
            if !batch_loss.is_finite() {
                return Err(TdError::Diverged { epoch, batch });
            }
            let mut grad = vec![0.0; theta.len()];
            tape.backward_into(loss * (1.0 / cfg.batch_size as f64), &mut grad);
            adam.update(&mut theta, &grad, &lr_scale);
            epoch_loss += batch_loss * cfg.batch_size as f64;
            epoch_segments += cfg.batch_size;
        }
        curve.push(epoch_loss / epoch_segments as f64);
    }

    Ok((DelayParams::from_slice(&theta), curve))
}

/// Which feature bucket a training trajectory observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMode {
    /// Always the hindsight bucket (features measured at the wheel location).
    Hindsight,
    /// One bucket drawn uniformly per trajectory per epoch, held constant
    /// through the trajectory.
    Randomized,
}

impl DistanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistanceMode::Hindsight => "hindsight",
            DistanceMode::Randomized => "randomized",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TdError> {
        match s {
            "hindsight" => Ok(DistanceMode::Hindsight),
            "randomized" => Ok(DistanceMode::Randomized),
            other => Err(TdError::Config(format!("unknown distance mode {other:?}"))),
        }
    }
}

/// Stage-2 training configuration.
#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier on the learning rate for the physics constants.
    pub physics_lr_mult: f64,
    /// Squared-error weights on (p_x, p_y, phi, v_x, v_y, r).
    pub loss_weights: [f64; 6],
    pub feature_mode: FeatureMode,
    pub distance_mode: DistanceMode,
    pub n_pca: usize,
    pub n_encoder: usize,
    /// Truncated backpropagation length in steps; None backpropagates
    /// through the whole window.
    pub tbptt_steps: Option<usize>,
    pub delay_fit: DelayFitConfig,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn new(feature_mode: FeatureMode, distance_mode: DistanceMode) -> Self {
        TrainingConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            physics_lr_mult: 0.1,
            loss_weights: [1.0, 1.0, 2.0, 1.0, 1.0, 1.0],
            feature_mode,
            distance_mode,
            n_pca: 40,
            n_encoder: 4,
            tbptt_steps: None,
            delay_fit: DelayFitConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TdError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TdError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.physics_lr_mult >= 0.0) {
            return Err(TdError::Config("learning rates must be positive".into()));
        }
        if let Some(k) = self.tbptt_steps {
            if k == 0 {
                return Err(TdError::Config("tbptt_steps must be positive when set".into()));
            }
        }
        Ok(())
    }
}

/// Weighted squared state error of a predicted trajectory against the
/// recorded window, summed over steps. `pred[t]` is compared with window row
/// `tau_steps + start_step + t + 1`; yaw error is wrapped to (-pi, pi].
pub fn trajectory_loss_f64(
    pred: &[VehicleState<f64>],
    win: &TeacherWindow,
    tau_steps: usize,
    start_step: usize,
    w: &[f64; 6],
) -> f64 {
    let mut total = 0.0;
    for (t, s) in pred.iter().enumerate() {
        let tgt = win.state(tau_steps + start_step + t + 1);
        let dpx = s.p_x - tgt.p_x;
        let dpy = s.p_y - tgt.p_y;
        let dphi = wrap_pi(s.phi - tgt.phi);
        let dvx = s.v_x - tgt.v_x;
        let dvy = s.v_y - tgt.v_y;
        let dr = s.r - tgt.r;
        total += w[0] * dpx * dpx
            + w[1] * dpy * dpy
            + w[2] * dphi * dphi
            + w[3] * dvx * dvx
            + w[4] * dvy * dvy
            + w[5] * dr * dr;
    }
    total
}

/// Tape counterpart of [`trajectory_loss_f64`]; identical arithmetic up to
/// evaluation order within a step.
pub fn trajectory_loss_tape<'t>(
    tape: &'t Tape,
    pred: &[VehicleState<Var<'t>>],
    win: &TeacherWindow,
    tau_steps: usize,
    start_step: usize,
    w: &[f64; 6],
) -> Var<'t> {
    let mut total = tape.constant(0.0);
    for (t, s) in pred.iter().enumerate() {
        let tgt = win.state(tau_steps + start_step + t + 1);
        let dpx = s.p_x - tgt.p_x;
        let dpy = s.p_y - tgt.p_y;
        let dphi = (s.phi - tgt.phi).wrap_pi();
        let dvx = s.v_x - tgt.v_x;
        let dvy = s.v_y - tgt.v_y;
        let dr = s.r - tgt.r;
        total = total
            + dpx.square() * w[0]
            + dpy.square() * w[1]
            + dphi.square() * w[2]
            + dvx.square() * w[3]
            + dvy.square() * w[4]
            + dr.square() * w[5];
    }
    total
}

/// Mean of all valid recorded feature vectors (first `n_pca` components)
/// across the training windows, every wheel and bucket. Used as the stand-in
/// observation for invalid cells; frozen at training time.
pub fn compute_feature_mean(ds: &Dataset, n_pca: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n_pca];
    let mut count = 0u64;
    let window = ds.chunks.window_rows();
    for sr in &ds.train {
        let shard = &ds.shards[sr.shard];
        for row in sr.row..sr.row + window {
            for wheel in 0..N_WHEELS {
                for bucket in 0..shard.n_buckets {
                    let cell = (row * N_WHEELS + wheel) * shard.n_buckets + bucket;
                    if shard.validity[cell] > 0 {
                        let base = cell * shard.n_pca;
                        for k in 0..n_pca {
                            acc[k] += shard.features[base + k] as f64;
                        }
                        count += 1;
                    }
                }
            }
        }
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        for v in &mut acc {
            *v *= inv;
        }
    }
    acc
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic per-trajectory bucket draw for randomized-distance
/// training: uniform over buckets, independent of batch order, a fresh draw
/// each epoch.
pub fn draw_bucket(seed: u64, epoch: usize, sample: usize, n_buckets: usize) -> usize {
    let h = splitmix(seed ^ splitmix(epoch as u64 ^ splitmix(sample as u64)));
    (h % n_buckets as u64) as usize
}

/// Everything produced by a training run.
pub struct TrainOutcome {
    pub model: HybridModel,
    /// Mean per-trajectory loss by epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-epoch mean segment loss of the stage-1 delay fit.
    pub delay_curve: Vec<f64>,
    /// Names of parameter blocks that never received a nonzero gradient
    /// during the first epoch. Expected to be empty.
    pub dead_params: Vec<String>,
}

fn sample_loss_grad(
    model: &HybridModel,
    win: &TeacherWindow,
    weights: &[f64; 6],
    tbptt_steps: Option<usize>,
    grad: &mut [f64],
) -> f64 {
    let spec = &model.spec;
    let horizon = spec.horizon_steps;
    let chunk = tbptt_steps.unwrap_or(horizon).min(horizon);
    let mut total = 0.0;
    let mut carry: Option<TapeCarry> = None;
    let mut start = 0usize;
    while start < horizon {
        let len = chunk.min(horizon - start);
        let warm = if start == 0 { spec.tau_steps } else { 0 };
        let tape = Tape::with_capacity(
            2_048 + 256 * (len + warm),
            16_384 + 2_048 * (len + warm),
        );
        let (states, next) =
            rollout_teacher_tape_chunk(&tape, &model.theta, model, win, start, len, carry.as_ref());
        let loss = trajectory_loss_tape(&tape, &states, win, spec.tau_steps, start, weights);
        total += loss.value();
        tape.backward_into(loss, grad);
        carry = Some(next);
        start += len;
    }
    total
}

/// Train a hybrid model on a dataset: stage-1 delay fit, then joint
/// optimization of physics constants and network weights over full
/// prediction windows.
pub fn train(ds: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome, TdError> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(TdError::Config("training needs a non-empty train split".into()));
    }
    let shard0 = &ds.shards[0];
    if cfg.feature_mode != FeatureMode::None && cfg.n_pca > shard0.n_pca {
        return Err(TdError::Config(format!(
            "model wants {} feature components but logs carry {}",
            cfg.n_pca, shard0.n_pca
        )));
    }

    let mut spec = HybridSpec::new(cfg.feature_mode, cfg.n_pca, cfg.n_encoder);
    spec.dt = shard0.dt;
    spec.tau_steps = ds.chunks.tau_steps;
    spec.horizon_steps = ds.chunks.horizon_steps;
    let mut model = HybridModel::new(spec, cfg.seed)?;

    let (delay, delay_curve) = fit_delay(ds, &cfg.delay_fit)?;
    model.delay = delay;
    if cfg.feature_mode != FeatureMode::None {
        model.feature_mean = compute_feature_mean(ds, cfg.n_pca);
    }

    let n_params = model.layout.total_len();
    let lr_scales = model.layout.lr_scales(cfg.physics_lr_mult);
    let mut adam = AdamState::new(n_params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut grad_seen = vec![false; n_params];
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed) ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_seen = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&si| {
                    let sr = ds.train[si];
                    let shard = &ds.shards[sr.shard];
                    let bucket = match cfg.distance_mode {
                        DistanceMode::Hindsight => 0,
                        DistanceMode::Randomized => {
                            draw_bucket(cfg.seed, epoch, si, shard.n_buckets)
                        }
                    };
                    let win = TeacherWindow::new(shard, sr.row, bucket, &model.spec);
                    let mut grad = vec![0.0; n_params];
                    let loss = sample_loss_grad(
                        &model,
                        &win,
                        &cfg.loss_weights,
                        cfg.tbptt_steps,
                        &mut grad,
                    );
                    (loss, grad)
                })
                .collect();

            let mut batch_grad = vec![0.0; n_params];
            let mut batch_loss = 0.0;
            for (loss, grad) in &results {
                batch_loss += loss;
                for (g, s) in batch_grad.iter_mut().zip(grad) {
                    *g += s;
                }
                if epoch == 0 {
                    for (seen, s) in grad_seen.iter_mut().zip(grad) {
                        *seen |= *s != 0.0;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(TdError::Diverged { epoch, batch: batch_idx });
            }
            for g in &mut batch_grad {
                *g *= inv;
            }
            adam.update(&mut model.theta, &batch_grad, &lr_scales);
            epoch_loss += batch_loss * batch.len() as f64;
            n_seen += batch.len();
        }
        epoch_losses.push(epoch_loss / n_seen as f64);
    }

    let dead_params = model
        .layout
        .entries()
        .iter()
        .filter(|e| !grad_seen[e.offset..e.offset + e.len()].iter().any(|&s| s))
        .map(|e| e.name.clone())
        .collect();

    Ok(TrainOutcome { model, epoch_losses, delay_curve, dead_params })
}

/// Distribution summary of per-trajectory endpoint errors for one
/// evaluation bucket. All statistics derive from `errors`; `from_errors` is
/// the single construction path.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub bucket: usize,
    /// Final-position Euclidean error per test trajectory, in test-set order.
    pub errors: Vec<f64>,
    /// Mean absolute endpoint error per state component
    /// (p_x, p_y, phi wrapped, v_x, v_y, r).
    pub endpoint_state_mae: [f64; 6],
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme errors within 1.5 IQR of the quartiles.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

/// Linearly interpolated percentile of a sorted slice, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl EvalReport {
    pub fn from_errors(
        bucket: usize,
        errors: Vec<f64>,
        endpoint_state_mae: [f64; 6],
    ) -> Result<Self, TdError> {
        if errors.is_empty() {
            return Err(TdError::Invalid("evaluation produced no errors".into()));
        }
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let q1 = percentile(&sorted, 0.25);
        let median = percentile(&sorted, 0.50);
        let q3 = percentile(&sorted, 0.75);
        let iqr = q3 - q1;
        let lo_bound = q1 - 1.5 * iqr;
        let hi_bound = q3 + 1.5 * iqr;
        let whisker_lo = sorted
            .iter()
            .copied()
            .find(|&e| e >= lo_bound)
            .unwrap_or(sorted[0]);
        let whisker_hi = sorted
            .iter()
            .rev()
            .copied()
            .find(|&e| e <= hi_bound)
            .unwrap_or(sorted[sorted.len() - 1]);
        Ok(EvalReport {
            bucket,
            errors,
            endpoint_state_mae,
            mean,
            median,
            q1,
            q3,
            whisker_lo,
            whisker_hi,
        })
    }

    /// Write the summary statistics into a key-value document under
    /// `prefix`. Raw errors are not included; persist them separately when
    /// the full distribution matters.
    pub fn to_kv(&self, doc: &mut KvDoc, prefix: &str) {
        doc.set(&format!("{prefix}.bucket"), self.bucket);
        doc.set(&format!("{prefix}.n"), self.errors.len());
        doc.set_f64(&format!("{prefix}.mean"), self.mean);
        doc.set_f64(&format!("{prefix}.median"), self.median);
        doc.set_f64(&format!("{prefix}.q1"), self.q1);
        doc.set_f64(&format!("{prefix}.q3"), self.q3);
        doc.set_f64(&format!("{prefix}.whisker_lo"), self.whisker_lo);
        doc.set_f64(&format!("{prefix}.whisker_hi"), self.whisker_hi);
        doc.set_f64(&format!("{prefix}.vx_mae"), self.endpoint_state_mae[3]);
    }
}

/// Evaluate a model on the test split with features drawn exclusively from
/// one bucket. The error metric is the Euclidean distance between predicted
/// and recorded position at the end of the prediction window.
pub fn evaluate(model: &HybridModel, ds: &Dataset, bucket: usize) -> Result<EvalReport, TdError> {
    if ds.test.is_empty() {
        return Err(TdError::Config("evaluation needs a non-empty test split".into()));
    }
    if bucket >= ds.shards[0].n_buckets {
        return Err(TdError::Config(format!(
            "bucket {bucket} out of range, logs carry {}",
            ds.shards[0].n_buckets
        )));
    }
    let tau = model.spec.tau_steps;
    let horizon = model.spec.horizon_steps;
    let per_sample: Vec<Result<(f64, [f64; 6]), TdError>> = ds
        .test
        .par_iter()
        .map(|sr| {
            let win = TeacherWindow::new(&ds.shards[sr.shard], sr.row, bucket, &model.spec);
            let pred = rollout_teacher_f64(model, &win)?;
            let last = pred[horizon - 1];
            let tgt = win.state(tau + horizon);
            let err = ((last.p_x - tgt.p_x).powi(2) + (last.p_y - tgt.p_y).powi(2)).sqrt();
            let abs = [
                (last.p_x - tgt.p_x).abs(),
                (last.p_y - tgt.p_y).abs(),
                wrap_pi(last.phi - tgt.phi).abs(),
                (last.v_x - tgt.v_x).abs(),
                (last.v_y - tgt.v_y).abs(),
                (last.r - tgt.r).abs(),
            ];
            Ok((err, abs))
        })
        .collect();

    let mut errors = Vec::with_capacity(per_sample.len());
    let mut mae = [0.0; 6];
    for r in per_sample {
        let (err, abs) = r?;
        errors.push(err);
        for (m, a) in mae.iter_mut().zip(abs) {
            *m += a;
        }
    }
    let inv = 1.0 / errors.len() as f64;
    for m in &mut mae {
        *m *= inv;
    }
    EvalReport::from_errors(bucket, errors, mae)
}

/// Fixed-width text table over labelled evaluation reports.
pub fn format_reports(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "label", "n", "mean", "median", "q1", "q3", "w_lo", "w_hi", "vx_mae"
    ));
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<16} {:>5} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}\n",
            label,
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
    out
}

/// Which model dimension an ablation sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Encoder output width, compressed mode.
    CompressionSize,
    /// Number of retained feature components, compressed mode.
    NPca,
}

pub struct AblationRow {
    pub label: String,
    pub n_pca: usize,
    pub n_encoder: usize,
    pub report: EvalReport,
}

/// Train and evaluate one model per value along the chosen axis, all in
/// compressed feature mode, plus a featureless baseline row first. Models
/// are evaluated on the hindsight bucket.
pub fn ablation_sweep(
    ds: &Dataset,
    base: &TrainingConfig,
    axis: AblationAxis,
    values: &[usize],
) -> Result<Vec<AblationRow>, TdError> {
    let mut rows = Vec::with_capacity(values.len() + 1);
    let mut cfg = base.clone();
    cfg.feature_mode = FeatureMode::None;
    let out = train(ds, &cfg)?;
    rows.push(AblationRow {
        label: "baseline".into(),
        n_pca: 0,
        n_encoder: 0,
        report: evaluate(&out.model, ds, 0)?,
    });
    for &v in values {
        let mut cfg = base.clone();
        cfg.feature_mode = FeatureMode::Compressed;
        let label = match axis {
            AblationAxis::CompressionSize => {
                cfg.n_encoder = v;
                format!("enc{v}")
            }
            AblationAxis::NPca => {
                cfg.n_pca = v;
                format!("pca{v}")
            }
        };
        let out = train(ds, &cfg)?;
        rows.push(AblationRow {
            label,
            n_pca: cfg.n_pca,
            n_encoder: cfg.n_encoder,
            report: evaluate(&out.model, ds, 0)?,
        });
    }
    Ok(rows)
}
