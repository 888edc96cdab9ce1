//! Hybrid predictive models: the parametric terradynamics forces composed
//! with an LSTM force compensator and, optionally, a per-wheel terrain
//! feature encoder feeding the compensator.
//!
//! A rollout starts from a 0.2 s window of recorded history that warms up
//! the compensator through a separate initialization LSTM, then integrates
//! closed-loop for the prediction horizon: at every step the parametric
//! forces are computed from the model's own predicted state and actuator
//! values, the compensator adds a correction in force space, and the body
//! derivatives are integrated with forward Euler. Controls and map inputs
//! are always the commanded/observed values, never predictions.
//!
//! The compensator input vector is a fixed contract shared by the plain and
//! differentiable rollout paths:
//! `[v_x/5, v_y/2, r, brake, steer, steer_rate, rpm/1000, u_throttle,
//! u_brake, u_steer, eta_x, eta_y, eta_z, f_x/4000, f_yf/4000, f_yb/4000,
//! f_r]` followed by the per-wheel feature block. The pose is deliberately
//! excluded so predictions are invariant to where on the map a maneuver
//! happens. The normal is the wheel-averaged surface normal rotated into
//! the predicted body frame.

use std::path::Path;

use crate::error::TdError;
use crate::features::{EncoderSpec, FeatureVector, N_WHEELS};
use crate::io::{LogShard, TensorBlob};
use crate::nn::{Activation, LstmSpec, DenseSpec, ParamLayout, SliceRef};
use crate::tape::{Tape, Var, VVar};
use crate::vehicle::{
    body_derivatives, compute_forces, euler_step, step_actuators, ActuatorState, ControlInput,
    DelayParams, ForceVector, ParamSet, SurfaceNormal, TerraParams, VehicleState, N_TERRA,
};

/// Scale dividing the parametric forces before they enter the compensator.
pub const FORCE_SCALE: f64 = 4000.0;

/// Scale multiplying the four compensator outputs before they are added to
/// `(f_x, f_yf, f_yb, f_r)`. Roughly a tenth of the force scale so a unit
/// network output is a moderate correction; the yaw channel is already an
/// angular acceleration.
pub const COMP_SCALE: [f64; 4] = [400.0, 800.0, 800.0, 0.4];

/// Input normalization for the velocity and engine speed channels.
pub const VX_SCALE: f64 = 5.0;
pub const VY_SCALE: f64 = 2.0;
pub const RPM_SCALE: f64 = 1000.0;

/// Compensator input entries before the feature block.
pub const BASE_INPUT_DIM: usize = 17;

/// Initialization scale for the final compensator layer: corrections start
/// near zero so an untrained model behaves like the parametric one.
pub const HEAD_INIT_SCALE: f64 = 0.01;

/// Lateral wheel offset from the vehicle centerline.
pub const HALF_TRACK_M: f64 = 0.8;

/// How terrain features enter the compensator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// Physics-only compensator: no terrain features.
    None,
    /// Raw per-wheel compressed features plus validity flags.
    Direct,
    /// Per-wheel features passed through the learned encoder.
    Compressed,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::None => "none",
            FeatureMode::Direct => "direct",
            FeatureMode::Compressed => "compressed",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TdError> {
        match s {
            "none" => Ok(FeatureMode::None),
            "direct" => Ok(FeatureMode::Direct),
            "compressed" => Ok(FeatureMode::Compressed),
            other => Err(TdError::Config(format!("unknown feature mode {other:?}"))),
        }
    }
}

/// Structural description of one hybrid model. Horizons are stored in steps
/// so `tau / dt` and `horizon / dt` are whole by construction.
#[derive(Clone, Copy, Debug)]
pub struct HybridSpec {
    pub feature_mode: FeatureMode,
    pub n_pca: usize,
    pub n_encoder: usize,
    pub dt: f64,
    pub tau_steps: usize,
    pub horizon_steps: usize,
    pub pred_hidden: usize,
    pub init_hidden: usize,
    pub head_hidden: usize,
}

impl HybridSpec {
    /// Defaults: dt 0.02 s, tau 0.2 s, horizon 5 s, predictor LSTM hidden 4,
    /// initialization LSTM hidden 20, output network hidden 20.
    pub fn new(feature_mode: FeatureMode, n_pca: usize, n_encoder: usize) -> Self {
        HybridSpec {
            feature_mode,
            n_pca,
            n_encoder,
            dt: 0.02,
            tau_steps: 10,
            horizon_steps: 250,
            pred_hidden: 4,
            init_hidden: 20,
            head_hidden: 20,
        }
    }

    pub fn validate(&self) -> Result<(), TdError> {
        if self.dt <= 0.0 || self.tau_steps == 0 || self.horizon_steps == 0 {
            return Err(TdError::Config("hybrid spec needs positive dt, tau, horizon".into()));
        }
        if self.pred_hidden == 0 || self.init_hidden == 0 || self.head_hidden == 0 {
            return Err(TdError::Config("hybrid spec needs positive hidden sizes".into()));
        }
        match self.feature_mode {
            FeatureMode::None => {}
            FeatureMode::Direct => {
                if self.n_pca == 0 {
                    return Err(TdError::Config("direct feature mode needs n_pca > 0".into()));
                }
            }
            FeatureMode::Compressed => {
                if self.n_pca == 0 || self.n_encoder == 0 {
                    return Err(TdError::Config(
                        "compressed feature mode needs n_pca and n_encoder > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.tau_steps as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    /// Width of the feature block appended to the base input.
    pub fn feature_input_dim(&self) -> usize {
        match self.feature_mode {
            FeatureMode::None => 0,
            FeatureMode::Direct => N_WHEELS * (self.n_pca + 1),
            FeatureMode::Compressed => N_WHEELS * self.n_encoder,
        }
    }

    pub fn input_dim(&self) -> usize {
        BASE_INPUT_DIM + self.feature_input_dim()
    }

    /// Log rows one teacher-forced sample spans: the warmup window, the
    /// prediction inputs, and the final loss target.
    pub fn window_rows(&self) -> usize {
        self.tau_steps + self.horizon_steps + 1
    }
}

/// Network slices registered in the parameter layout.
#[derive(Clone, Debug)]
pub struct HybridNets {
    pub terra: SliceRef,
    pub encoder: Option<EncoderSpec>,
    pub init_lstm: LstmSpec,
    pub init_head: DenseSpec,
    pub pred_lstm: LstmSpec,
    pub head1: DenseSpec,
    pub head2: DenseSpec,
}

/// One hybrid model: flat parameter vector holding the terradynamics
/// constants and every network weight, plus the actuator delay constants,
/// which are fitted separately and stay fixed while the rest trains.
#[derive(Clone, Debug)]
pub struct HybridModel {
    pub spec: HybridSpec,
    pub layout: ParamLayout,
    pub nets: HybridNets,
    pub theta: Vec<f64>,
    pub delay: DelayParams<f64>,
    pub max_steer: f64,
    /// Training mean of the compressed features, substituted for missing
    /// observations. Frozen after training.
    pub feature_mean: Vec<f64>,
}

fn build_layout(spec: &HybridSpec) -> (ParamLayout, HybridNets) {
    let mut layout = ParamLayout::new();
    let terra = layout.physics("terra", N_TERRA);
    let encoder = match spec.feature_mode {
        FeatureMode::Compressed => {
            Some(EncoderSpec::register(&mut layout, spec.n_pca, spec.n_encoder))
        }
        _ => None,
    };
    let n_in = spec.input_dim();
    let init_lstm = layout.lstm("init.lstm", n_in, spec.init_hidden);
    let init_head =
        layout.dense("init.head", spec.init_hidden, 2 * spec.pred_hidden, Activation::Identity);
    let pred_lstm = layout.lstm("pred.lstm", n_in, spec.pred_hidden);
    let head1 = layout.dense("head.1", spec.pred_hidden, spec.head_hidden, Activation::Tanh);
    let head2 =
        layout.dense_scaled("head.2", spec.head_hidden, 4, Activation::Identity, HEAD_INIT_SCALE);
    let nets = HybridNets { terra, encoder, init_lstm, init_head, pred_lstm, head1, head2 };
    (layout, nets)
}

impl HybridModel {
    /// Fresh model: seeded network weights, physics constants at their
    /// fitting initialization, zero feature mean.
    pub fn new(spec: HybridSpec, seed: u64) -> Result<Self, TdError> {
        spec.validate()?;
        let (layout, nets) = build_layout(&spec);
        let mut theta = layout.init(seed);
        let init = ParamSet::fit_init();
        let tvec = init.terra.to_vec();
        theta[nets.terra.offset..nets.terra.offset + N_TERRA].copy_from_slice(&tvec);
        Ok(HybridModel {
            spec,
            layout,
            nets,
            theta,
            delay: init.delay,
            max_steer: init.max_steer,
            feature_mean: vec![0.0; spec.n_pca],
        })
    }

    pub fn terra_params(&self) -> TerraParams<f64> {
        let o = self.nets.terra.offset;
        TerraParams::from_slice(&self.theta[o..o + N_TERRA])
    }

    pub fn params(&self) -> ParamSet {
        ParamSet { terra: self.terra_params(), delay: self.delay, max_steer: self.max_steer }
    }

    /// The feature vector used when a wheel has no observation.
    pub fn missing_feature(&self) -> FeatureVector {
        FeatureVector::missing(&self.feature_mean)
    }

    pub fn save(&self, path: &Path) -> Result<(), TdError> {
        let mut blob = TensorBlob::default();
        let s = &self.spec;
        blob.meta.insert("kind".into(), "hybrid-model".into());
        blob.meta.insert("feature_mode".into(), s.feature_mode.as_str().into());
        for (k, v) in [
            ("n_pca", s.n_pca),
            ("n_encoder", s.n_encoder),
            ("tau_steps", s.tau_steps),
            ("horizon_steps", s.horizon_steps),
            ("pred_hidden", s.pred_hidden),
            ("init_hidden", s.init_hidden),
            ("head_hidden", s.head_hidden),
        ] {
            blob.meta.insert(k.into(), v.to_string());
        }
        blob.push("theta", self.theta.len(), 1, self.theta.clone());
        blob.push("delay", crate::vehicle::N_DELAY, 1, self.delay.to_vec());
        blob.push("scalars", 2, 1, vec![s.dt, self.max_steer]);
        if !self.feature_mean.is_empty() {
            blob.push("feature_mean", self.feature_mean.len(), 1, self.feature_mean.clone());
        }
        blob.write(path)
    }

    pub fn load(path: &Path) -> Result<Self, TdError> {
        let blob = TensorBlob::read(path)?;
        let meta_usize = |k: &str| -> Result<usize, TdError> {
            blob.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TdError::format(path, format!("missing or bad meta key {k}")))
        };
        let mode = blob
            .meta
            .get("feature_mode")
            .ok_or_else(|| TdError::format(path, "missing feature_mode"))?;
        let (_, _, scalars) = blob.require("scalars", path)?;
        let spec = HybridSpec {
            feature_mode: FeatureMode::parse(mode)?,
            n_pca: meta_usize("n_pca")?,
            n_encoder: meta_usize("n_encoder")?,
            dt: scalars[0],
            tau_steps: meta_usize("tau_steps")?,
            horizon_steps: meta_usize("horizon_steps")?,
            pred_hidden: meta_usize("pred_hidden")?,
            init_hidden: meta_usize("init_hidden")?,
            head_hidden: meta_usize("head_hidden")?,
        };
        spec.validate()?;
        let (layout, nets) = build_layout(&spec);
        let (_, _, theta) = blob.require("theta", path)?;
        if theta.len() != layout.total_len() {
            return Err(TdError::format(
                path,
                format!("theta has {} values, layout needs {}", theta.len(), layout.total_len()),
            ));
        }
        let (_, _, delay) = blob.require("delay", path)?;
        let feature_mean = match blob.get("feature_mean") {
            Some((_, _, m)) => m.to_vec(),
            None => Vec::new(),
        };
        Ok(HybridModel {
            spec,
            layout,
            nets,
            theta: theta.to_vec(),
            delay: DelayParams::from_slice(delay),
            max_steer: scalars[1],
            feature_mean,
        })
    }
}

/// Everything the model reads from the map at one step: per-wheel surface
/// normals and per-wheel feature observations. A wheel outside the map or
/// over an unobserved cell carries the substituted mean and a -1 flag.
/// `pre_encoded` marks features already passed through the encoder, as
/// stored in planner maps; they bypass the encoder inside the model.
#[derive(Clone, Debug)]
pub struct MapQuery {
    pub normals: [SurfaceNormal<f64>; N_WHEELS],
    pub features: [FeatureVector; N_WHEELS],
    pub pre_encoded: bool,
}

impl MapQuery {
    /// Flat ground, all features missing.
    pub fn flat_missing(model: &HybridModel) -> Self {
        MapQuery {
            normals: [SurfaceNormal::flat(); N_WHEELS],
            features: std::array::from_fn(|_| model.missing_feature()),
            pre_encoded: false,
        }
    }

    /// Wheel-averaged world-frame normal.
    pub fn mean_normal(&self) -> SurfaceNormal<f64> {
        mean_normal_of(&self.normals)
    }
}

pub fn mean_normal_of(normals: &[SurfaceNormal<f64>; N_WHEELS]) -> SurfaceNormal<f64> {
    let mut acc = [0.0; 3];
    for n in normals {
        acc[0] += n.eta_x;
        acc[1] += n.eta_y;
        acc[2] += n.eta_z;
    }
    SurfaceNormal::from_raw(acc[0], acc[1], acc[2])
}

/// One recorded step of history used to warm up the compensator.
#[derive(Clone, Debug)]
pub struct HistoryRow {
    pub state: VehicleState<f64>,
    pub actuators: ActuatorState<f64>,
    pub control: ControlInput,
    pub query: MapQuery,
}

/// Wheel contact positions in world frame, order FL, FR, RL, RR.
pub fn wheel_positions(state: &VehicleState<f64>, l_front: f64, l_rear: f64) -> [[f64; 2]; 4] {
    let (c, s) = (state.phi.cos(), state.phi.sin());
    let at = |bx: f64, by: f64| [state.p_x + c * bx - s * by, state.p_y + s * bx + c * by];
    [
        at(l_front, HALF_TRACK_M),
        at(l_front, -HALF_TRACK_M),
        at(-l_rear, HALF_TRACK_M),
        at(-l_rear, -HALF_TRACK_M),
    ]
}

/// Fill the compensator input vector and return the body-frame normal and
/// parametric forces the entries were computed from.
fn assemble_f64(
    model: &HybridModel,
    terra: &TerraParams<f64>,
    state: &VehicleState<f64>,
    actuators: &ActuatorState<f64>,
    control: &ControlInput,
    query: &MapQuery,
    input: &mut [f64],
) -> (SurfaceNormal<f64>, ForceVector<f64>) {
    let normal = query.mean_normal().to_body(state.phi);
    let forces = compute_forces(state, actuators, control, &normal, terra);
    input[0] = state.v_x * (1.0 / VX_SCALE);
    input[1] = state.v_y * (1.0 / VY_SCALE);
    input[2] = state.r;
    input[3] = actuators.brake_pressure;
    input[4] = actuators.steer_angle;
    input[5] = actuators.steer_rate;
    input[6] = actuators.engine_rpm * (1.0 / RPM_SCALE);
    input[7] = control.throttle;
    input[8] = control.brake_cmd;
    input[9] = control.steer_cmd;
    input[10] = normal.eta_x;
    input[11] = normal.eta_y;
    input[12] = normal.eta_z;
    input[13] = forces.f_x * (1.0 / FORCE_SCALE);
    input[14] = forces.f_yf * (1.0 / FORCE_SCALE);
    input[15] = forces.f_yb * (1.0 / FORCE_SCALE);
    input[16] = forces.f_r;
    match model.spec.feature_mode {
        FeatureMode::None => {}
        FeatureMode::Direct => {
            let width = model.spec.n_pca + 1;
            for (w, f) in query.features.iter().enumerate() {
                let o = BASE_INPUT_DIM + w * width;
                input[o..o + model.spec.n_pca].copy_from_slice(&f.values);
                input[o + model.spec.n_pca] = f.flag();
            }
        }
        FeatureMode::Compressed => {
            let enc = model.nets.encoder.as_ref().expect("compressed model has encoder");
            let o = BASE_INPUT_DIM;
            if query.pre_encoded {
                for (w, f) in query.features.iter().enumerate() {
                    assert_eq!(f.values.len(), enc.n_encoder, "pre-encoded feature width");
                    input[o + w * enc.n_encoder..o + (w + 1) * enc.n_encoder]
                        .copy_from_slice(&f.values);
                }
            } else {
                enc.encode_f64(
                    &model.theta,
                    &query.features,
                    &mut input[o..o + N_WHEELS * enc.n_encoder],
                );
            }
        }
    }
    (normal, forces)
}

/// Stateful compensator for one rollout: owns the predictor LSTM hidden
/// state. The model itself stays read-only, so many compensators can run
/// concurrently against one model.
pub struct Compensator<'m> {
    model: &'m HybridModel,
    terra: TerraParams<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
    initialized: bool,
    input: Vec<f64>,
    scratch: Vec<f64>,
    hid: Vec<f64>,
    comp: Vec<f64>,
}

impl<'m> Compensator<'m> {
    pub fn new(model: &'m HybridModel) -> Self {
        let s = &model.spec;
        Compensator {
            model,
            terra: model.terra_params(),
            h: vec![0.0; s.pred_hidden],
            c: vec![0.0; s.pred_hidden],
            initialized: false,
            input: vec![0.0; s.input_dim()],
            scratch: vec![0.0; 4 * s.init_hidden.max(s.pred_hidden)],
            hid: vec![0.0; s.head_hidden],
            comp: vec![0.0; 4],
        }
    }

    /// Run the initialization LSTM over the recorded history window and set
    /// the predictor's initial hidden and cell state from its final output.
    pub fn warm_up(&mut self, history: &[HistoryRow]) -> Result<(), TdError> {
        let s = &self.model.spec;
        if history.len() != s.tau_steps {
            return Err(TdError::Shape(format!(
                "warmup window has {} rows, spec needs {}",
                history.len(),
                s.tau_steps
            )));
        }
        let mut hi = vec![0.0; s.init_hidden];
        let mut ci = vec![0.0; s.init_hidden];
        for row in history {
            assemble_f64(
                self.model,
                &self.terra,
                &row.state,
                &row.actuators,
                &row.control,
                &row.query,
                &mut self.input,
            );
            self.model.nets.init_lstm.step_f64(
                &self.model.theta,
                &self.input,
                &mut hi,
                &mut ci,
                &mut self.scratch[..4 * s.init_hidden],
            );
        }
        let mut out = vec![0.0; 2 * s.pred_hidden];
        self.model.nets.init_head.forward_f64(&self.model.theta, &hi, &mut out);
        for k in 0..s.pred_hidden {
            self.h[k] = out[k].tanh();
            self.c[k] = out[s.pred_hidden + k];
        }
        self.initialized = true;
        Ok(())
    }

    /// One compensated step: parametric forces, LSTM correction in force
    /// space, then the body derivatives from the corrected forces. Returns
    /// the derivative and the corrected forces.
    pub fn compensated_derivative(
        &mut self,
        state: &VehicleState<f64>,
        actuators: &ActuatorState<f64>,
        control: &ControlInput,
        query: &MapQuery,
    ) -> Result<(VehicleState<f64>, ForceVector<f64>), TdError> {
        if !self.initialized {
            return Err(TdError::UninitializedHidden);
        }
        let s = &self.model.spec;
        let (normal, mut forces) =
            assemble_f64(self.model, &self.terra, state, actuators, control, query, &mut self.input);
        self.model.nets.pred_lstm.step_f64(
            &self.model.theta,
            &self.input,
            &mut self.h,
            &mut self.c,
            &mut self.scratch[..4 * s.pred_hidden],
        );
        self.model.nets.head1.forward_f64(&self.model.theta, &self.h, &mut self.hid);
        self.model.nets.head2.forward_f64(&self.model.theta, &self.hid, &mut self.comp);
        forces.f_x += COMP_SCALE[0] * self.comp[0];
        forces.f_yf += COMP_SCALE[1] * self.comp[1];
        forces.f_yb += COMP_SCALE[2] * self.comp[2];
        forces.f_r += COMP_SCALE[3] * self.comp[3];
        let deriv = body_derivatives(state, &forces, actuators.steer_angle, &normal, &self.terra);
        Ok((deriv, forces))
    }
}

/// View of one teacher-forced training sample inside a log shard: the rows
/// starting at `start`, with features drawn from one observation-distance
/// bucket.
#[derive(Clone, Copy, Debug)]
pub struct TeacherWindow<'a> {
    pub shard: &'a LogShard,
    pub start: usize,
    pub bucket: usize,
}

impl<'a> TeacherWindow<'a> {
    pub fn new(shard: &'a LogShard, start: usize, bucket: usize, spec: &HybridSpec) -> Self {
        assert!(start + spec.window_rows() <= shard.states.len(), "window exceeds shard");
        assert!(bucket < shard.n_buckets, "bucket out of range");
        TeacherWindow { shard, start, bucket }
    }

    pub fn state(&self, i: usize) -> VehicleState<f64> {
        VehicleState::from_array(&self.shard.states[self.start + i])
    }

    pub fn actuators(&self, i: usize) -> ActuatorState<f64> {
        ActuatorState::from_array(&self.shard.actuators[self.start + i])
    }

    pub fn control(&self, i: usize) -> ControlInput {
        ControlInput::from_array(&self.shard.controls[self.start + i])
    }

    /// Feature observation for one wheel at window row `i`, truncated to the
    /// leading `n_pca` components (valid because PCA components are ordered
    /// by variance), with the mean substituted when the log marks it missing.
    pub fn feature(&self, mean: &[f64], n_pca: usize, i: usize, wheel: usize) -> FeatureVector {
        let shard = self.shard;
        assert!(n_pca <= shard.n_pca, "model wants more components than the log has");
        let row = self.start + i;
        let cell = (row * N_WHEELS + wheel) * shard.n_buckets + self.bucket;
        if shard.validity[cell] > 0 {
            let base = cell * shard.n_pca;
            let values = shard.features[base..base + n_pca].iter().map(|&v| v as f64).collect();
            FeatureVector::observed(values)
        } else {
            FeatureVector::missing(mean)
        }
    }

    pub fn query(&self, model: &HybridModel, i: usize) -> MapQuery {
        let row = self.start + i;
        let normals = std::array::from_fn(|w| {
            let n = self.shard.normals[row][w];
            SurfaceNormal { eta_x: n[0], eta_y: n[1], eta_z: n[2] }
        });
        let features = match model.spec.feature_mode {
            FeatureMode::None => std::array::from_fn(|_| model.missing_feature()),
            _ => std::array::from_fn(|w| {
                self.feature(&model.feature_mean, model.spec.n_pca, i, w)
            }),
        };
        MapQuery { normals, features, pre_encoded: false }
    }

    pub fn history_row(&self, model: &HybridModel, i: usize) -> HistoryRow {
        HistoryRow {
            state: self.state(i),
            actuators: self.actuators(i),
            control: self.control(i),
            query: self.query(model, i),
        }
    }
}

/// Teacher-forced rollout in plain `f64`: warm up on the first tau rows,
/// then predict `horizon_steps` states closed-loop using recorded controls
/// and map observations. Returns the predicted states for window rows
/// `tau+1 ..= tau+horizon`.
pub fn rollout_teacher_f64(
    model: &HybridModel,
    win: &TeacherWindow,
) -> Result<Vec<VehicleState<f64>>, TdError> {
    let spec = &model.spec;
    let mut comp = Compensator::new(model);
    let history: Vec<HistoryRow> =
        (0..spec.tau_steps).map(|i| win.history_row(model, i)).collect();
    comp.warm_up(&history)?;
    let mut state = win.state(spec.tau_steps);
    let mut act = win.actuators(spec.tau_steps);
    let mut out = Vec::with_capacity(spec.horizon_steps);
    for t in 0..spec.horizon_steps {
        let row = spec.tau_steps + t;
        let control = win.control(row);
        let query = win.query(model, row);
        let (deriv, _) = comp.compensated_derivative(&state, &act, &control, &query)?;
        let next = euler_step(&state, &deriv, spec.dt);
        act = step_actuators(&act, &control, state.v_x, &model.delay, model.max_steer, spec.dt);
        state = next;
        out.push(state);
    }
    Ok(out)
}

/// Closed-loop rollout against a map: wheel positions are computed from the
/// predicted state each step and handed to `query_fn`, which produces the
/// map observation (missing-marked outside coverage, never a failure). Runs
/// one step per control; the planner may use shorter horizons.
pub fn rollout_runtime<F>(
    model: &HybridModel,
    history: &[HistoryRow],
    initial_state: &VehicleState<f64>,
    initial_actuators: &ActuatorState<f64>,
    controls: &[ControlInput],
    mut query_fn: F,
) -> Result<Vec<VehicleState<f64>>, TdError>
where
    F: FnMut(&VehicleState<f64>, &[[f64; 2]; N_WHEELS]) -> MapQuery,
{
    let spec = &model.spec;
    let mut comp = Compensator::new(model);
    comp.warm_up(history)?;
    let terra = model.terra_params();
    let mut state = *initial_state;
    let mut act = *initial_actuators;
    let mut out = Vec::with_capacity(controls.len());
    for control in controls {
        let wheels = wheel_positions(&state, terra.l_front, terra.l_rear);
        let query = query_fn(&state, &wheels);
        let (deriv, _) = comp.compensated_derivative(&state, &act, control, &query)?;
        let next = euler_step(&state, &deriv, spec.dt);
        act = step_actuators(&act, control, state.v_x, &model.delay, model.max_steer, spec.dt);
        state = next;
        out.push(state);
    }
    Ok(out)
}

fn lift_state<'t>(tape: &'t Tape, s: &VehicleState<f64>) -> VehicleState<Var<'t>> {
    VehicleState {
        p_x: tape.constant(s.p_x),
        p_y: tape.constant(s.p_y),
        phi: tape.constant(s.phi),
        v_x: tape.constant(s.v_x),
        v_y: tape.constant(s.v_y),
        r: tape.constant(s.r),
    }
}

fn lift_actuators<'t>(tape: &'t Tape, a: &ActuatorState<f64>) -> ActuatorState<Var<'t>> {
    ActuatorState {
        brake_pressure: tape.constant(a.brake_pressure),
        steer_angle: tape.constant(a.steer_angle),
        steer_rate: tape.constant(a.steer_rate),
        engine_rpm: tape.constant(a.engine_rpm),
    }
}

/// Values carried across truncated-backprop chunk boundaries: the predicted
/// vehicle and actuator state plus the predictor LSTM hidden state, all
/// detached from the previous chunk's tape.
#[derive(Clone, Debug)]
pub struct TapeCarry {
    pub state: VehicleState<f64>,
    pub actuators: ActuatorState<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Teacher-forced rollout recorded on a tape for training: identical
/// computation to `rollout_teacher_f64` with parameters read from `theta`.
/// The delay constants enter as plain constants, so they stay fixed.
/// Returns the predicted states for window rows `tau+1 ..= tau+horizon`.
pub fn rollout_teacher_tape<'t>(
    tape: &'t Tape,
    theta: &[f64],
    model: &HybridModel,
    win: &TeacherWindow,
) -> Vec<VehicleState<Var<'t>>> {
    rollout_teacher_tape_chunk(tape, theta, model, win, 0, model.spec.horizon_steps, None).0
}

/// One chunk of a teacher-forced tape rollout, for truncated backprop
/// through time. The first chunk (`start_step` 0, no carry) runs the
/// warmup; later chunks resume from the carried values as constants, so
/// gradients stop at chunk boundaries. Predicted states for steps
/// `start_step .. start_step+n_steps` are returned with the carry for the
/// next chunk.
pub fn rollout_teacher_tape_chunk<'t>(
    tape: &'t Tape,
    theta: &[f64],
    model: &HybridModel,
    win: &TeacherWindow,
    start_step: usize,
    n_steps: usize,
    carry: Option<&TapeCarry>,
) -> (Vec<VehicleState<Var<'t>>>, TapeCarry) {
    let spec = &model.spec;
    assert!(start_step + n_steps <= spec.horizon_steps, "chunk exceeds horizon");
    assert_eq!(carry.is_some(), start_step > 0, "carry exactly on continuation chunks");
    assert!(win.start + spec.window_rows() <= win.shard.states.len());

    let tv = tape.param_slice(theta, model.nets.terra.offset, N_TERRA);
    let tvars: Vec<Var<'t>> = (0..N_TERRA).map(|i| tv.at(i)).collect();
    let terra = TerraParams::from_slice(&tvars);
    let dvars: Vec<Var<'t>> =
        model.delay.to_vec().iter().map(|&v| tape.constant(v)).collect();
    let delay = DelayParams::from_slice(&dvars);

    // Input rows this chunk touches: the warmup window on the first chunk,
    // then this chunk's prediction inputs.
    let row_lo = if start_step == 0 { 0 } else { spec.tau_steps + start_step };
    let row_hi = spec.tau_steps + start_step + n_steps;
    let n_rows = row_hi - row_lo;

    // Wheel-averaged world normals per touched row, plain f64.
    let normals: Vec<[f64; 3]> = (row_lo..row_hi)
        .map(|i| {
            let raw = &win.shard.normals[win.start + i];
            let ns = std::array::from_fn(|w| SurfaceNormal {
                eta_x: raw[w][0],
                eta_y: raw[w][1],
                eta_z: raw[w][2],
            });
            let m = mean_normal_of(&ns);
            [m.eta_x, m.eta_y, m.eta_z]
        })
        .collect();

    // Feature block per touched row. Compressed features run through the
    // encoder in one batched pass over all rows and wheels.
    let feats: Option<Vec<VVar<'t>>> = match spec.feature_mode {
        FeatureMode::None => None,
        FeatureMode::Direct => {
            let width = spec.n_pca + 1;
            let mut buf = vec![0.0; N_WHEELS * width];
            Some(
                (row_lo..row_hi)
                    .map(|i| {
                        for w in 0..N_WHEELS {
                            let f = win.feature(&model.feature_mean, spec.n_pca, i, w);
                            buf[w * width..w * width + spec.n_pca].copy_from_slice(&f.values);
                            buf[w * width + spec.n_pca] = f.flag();
                        }
                        tape.constants(&buf)
                    })
                    .collect(),
            )
        }
        FeatureMode::Compressed => {
            let enc = model.nets.encoder.as_ref().expect("compressed model has encoder");
            let cols = n_rows * N_WHEELS;
            let dim = enc.input_dim();
            let mut mat = vec![0.0; dim * cols];
            for (k, i) in (row_lo..row_hi).enumerate() {
                for w in 0..N_WHEELS {
                    let f = win.feature(&model.feature_mean, spec.n_pca, i, w);
                    enc.fill_input(&mut mat[(k * N_WHEELS + w) * dim..][..dim], &f);
                }
            }
            let out = enc.bind(tape, theta).forward(tape.constants(&mat), cols);
            let block = N_WHEELS * enc.n_encoder;
            Some((0..n_rows).map(|k| out.slice(k * block, block)).collect())
        }
    };

    let init_lstm = model.nets.init_lstm.bind(tape, theta);
    let init_head = model.nets.init_head.bind(tape, theta);
    let pred_lstm = model.nets.pred_lstm.bind(tape, theta);
    let head1 = model.nets.head1.bind(tape, theta);
    let head2 = model.nets.head2.bind(tape, theta);
    let inv_force = 1.0 / FORCE_SCALE;

    let (mut hp, mut cp, mut state, mut act);
    if let Some(carry) = carry {
        hp = tape.constants(&carry.h);
        cp = tape.constants(&carry.c);
        state = lift_state(tape, &carry.state);
        act = lift_actuators(tape, &carry.actuators);
    } else {
        // Warmup: recorded rows, forces recomputed from the tape's terra
        // parameters so physics gradients flow through the window too.
        let mut hi = tape.constants(&vec![0.0; spec.init_hidden]);
        let mut ci = tape.constants(&vec![0.0; spec.init_hidden]);
        for i in 0..spec.tau_steps {
            let rstate = win.state(i);
            let ract = win.actuators(i);
            let control = win.control(i);
            let sv = lift_state(tape, &rstate);
            let av = lift_actuators(tape, &ract);
            let n = normals[i];
            let nv = SurfaceNormal {
                eta_x: tape.constant(n[0]),
                eta_y: tape.constant(n[1]),
                eta_z: tape.constant(n[2]),
            }
            .to_body(sv.phi);
            let forces = compute_forces(&sv, &av, &control, &nv, &terra);
            let base = [
                rstate.v_x * (1.0 / VX_SCALE),
                rstate.v_y * (1.0 / VY_SCALE),
                rstate.r,
                ract.brake_pressure,
                ract.steer_angle,
                ract.steer_rate,
                ract.engine_rpm * (1.0 / RPM_SCALE),
                control.throttle,
                control.brake_cmd,
                control.steer_cmd,
            ];
            let mut parts = vec![
                tape.constants(&base),
                nv.eta_x.vec(),
                nv.eta_y.vec(),
                nv.eta_z.vec(),
                (forces.f_x * inv_force).vec(),
                (forces.f_yf * inv_force).vec(),
                (forces.f_yb * inv_force).vec(),
                forces.f_r.vec(),
            ];
            if let Some(f) = &feats {
                parts.push(f[i]);
            }
            let x = tape.concat(&parts);
            let (h2, c2) = init_lstm.step(x, hi, ci);
            hi = h2;
            ci = c2;
        }
        let seed = init_head.forward(hi, 1);
        hp = seed.slice(0, spec.pred_hidden).tanh();
        cp = seed.slice(spec.pred_hidden, spec.pred_hidden);
        state = lift_state(tape, &win.state(spec.tau_steps));
        act = lift_actuators(tape, &win.actuators(spec.tau_steps));
    }

    let mut out = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let i = spec.tau_steps + start_step + t;
        let control = win.control(i);
        let n = normals[i - row_lo];
        let nv = SurfaceNormal {
            eta_x: tape.constant(n[0]),
            eta_y: tape.constant(n[1]),
            eta_z: tape.constant(n[2]),
        }
        .to_body(state.phi);
        let forces = compute_forces(&state, &act, &control, &nv, &terra);
        let mut parts = vec![
            (state.v_x * (1.0 / VX_SCALE)).vec(),
            (state.v_y * (1.0 / VY_SCALE)).vec(),
            state.r.vec(),
            act.brake_pressure.vec(),
            act.steer_angle.vec(),
            act.steer_rate.vec(),
            (act.engine_rpm * (1.0 / RPM_SCALE)).vec(),
            tape.constants(&[control.throttle, control.brake_cmd, control.steer_cmd]),
            nv.eta_x.vec(),
            nv.eta_y.vec(),
            nv.eta_z.vec(),
            (forces.f_x * inv_force).vec(),
            (forces.f_yf * inv_force).vec(),
            (forces.f_yb * inv_force).vec(),
            forces.f_r.vec(),
        ];
        if let Some(f) = &feats {
            parts.push(f[i - row_lo]);
        }
        let x = tape.concat(&parts);
        let (h2, c2) = pred_lstm.step(x, hp, cp);
        hp = h2;
        cp = c2;
        let comp = head2.forward(head1.forward(hp, 1), 1);
        let forces = ForceVector {
            f_x: forces.f_x + comp.at(0) * COMP_SCALE[0],
            f_yf: forces.f_yf + comp.at(1) * COMP_SCALE[1],
            f_yb: forces.f_yb + comp.at(2) * COMP_SCALE[2],
            f_r: forces.f_r + comp.at(3) * COMP_SCALE[3],
        };
        let deriv = body_derivatives(&state, &forces, act.steer_angle, &nv, &terra);
        let next = euler_step(&state, &deriv, spec.dt);
        act = step_actuators(&act, &control, state.v_x, &delay, model.max_steer, spec.dt);
        state = next;
        out.push(state);
    }
    let carry_out = TapeCarry {
        state: VehicleState {
            p_x: state.p_x.value(),
            p_y: state.p_y.value(),
            phi: state.phi.value(),
            v_x: state.v_x.value(),
            v_y: state.v_y.value(),
            r: state.r.value(),
        },
        actuators: ActuatorState {
            brake_pressure: act.brake_pressure.value(),
            steer_angle: act.steer_angle.value(),
            steer_rate: act.steer_rate.value(),
            engine_rpm: act.engine_rpm.value(),
        },
        h: hp.values(),
        c: cp.values(),
    };
    (out, carry_out)
}

/// One rolled-out trajectory with everything the model consumed, for
/// inspection and replay.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<VehicleState<f64>>,
    pub actuators: Vec<ActuatorState<f64>>,
    pub controls: Vec<ControlInput>,
    pub queries: Vec<MapQuery>,
}

impl Trajectory {
    /// Columnar save: one named column group per signal.
    pub fn save(&self, path: &Path) -> Result<(), TdError> {
        let n = self.states.len();
        if self.actuators.len() != n || self.controls.len() != n || self.queries.len() != n {
            return Err(TdError::Shape("trajectory columns disagree on length".into()));
        }
        if n == 0 {
            return Err(TdError::Invalid("refusing to save an empty trajectory".into()));
        }
        let feat_dim = self.queries[0].features[0].values.len();
        let pre_encoded = self.queries[0].pre_encoded;
        let mut blob = TensorBlob::default();
        blob.meta.insert("kind".into(), "trajectory".into());
        blob.meta.insert("feat_dim".into(), feat_dim.to_string());
        blob.meta.insert("pre_encoded".into(), u8::from(pre_encoded).to_string());
        blob.push("time", n, 1, (0..n).map(|i| (i + 1) as f64 * self.dt).collect());
        blob.push("dt", 1, 1, vec![self.dt]);
        blob.push("states", n, 6, self.states.iter().flat_map(|s| s.to_array()).collect());
        blob.push("actuators", n, 4, self.actuators.iter().flat_map(|a| a.to_array()).collect());
        blob.push("controls", n, 3, self.controls.iter().flat_map(|c| c.to_array()).collect());
        let mut normals = Vec::with_capacity(n * 12);
        let mut feats = Vec::with_capacity(n * N_WHEELS * feat_dim);
        let mut flags = Vec::with_capacity(n * N_WHEELS);
        for q in &self.queries {
            if q.pre_encoded != pre_encoded {
                return Err(TdError::Shape("mixed pre-encoded flags in trajectory".into()));
            }
            for w in 0..N_WHEELS {
                let nr = &q.normals[w];
                normals.extend([nr.eta_x, nr.eta_y, nr.eta_z]);
                let f = &q.features[w];
                if f.values.len() != feat_dim {
                    return Err(TdError::Shape("mixed feature widths in trajectory".into()));
                }
                feats.extend_from_slice(&f.values);
                flags.push(f.flag());
            }
        }
        blob.push("normals", n, 12, normals);
        if feat_dim > 0 {
            blob.push("features", n, N_WHEELS * feat_dim, feats);
        }
        blob.push("flags", n, N_WHEELS, flags);
        blob.write(path)
    }

    pub fn load(path: &Path) -> Result<Self, TdError> {
        let blob = TensorBlob::read(path)?;
        let feat_dim: usize = blob
            .meta
            .get("feat_dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TdError::format(path, "missing feat_dim"))?;
        let pre_encoded = blob.meta.get("pre_encoded").map(String::as_str) == Some("1");
        let (_, _, dt) = blob.require("dt", path)?;
        let (n, _, states) = blob.require("states", path)?;
        let (_, _, actuators) = blob.require("actuators", path)?;
        let (_, _, controls) = blob.require("controls", path)?;
        let (_, _, normals) = blob.require("normals", path)?;
        let (_, _, flags) = blob.require("flags", path)?;
        let feats = if feat_dim > 0 { blob.require("features", path)?.2 } else { &[] };
        let mut queries = Vec::with_capacity(n);
        for i in 0..n {
            let q_normals = std::array::from_fn(|w| {
                let o = i * 12 + w * 3;
                SurfaceNormal {
                    eta_x: normals[o],
                    eta_y: normals[o + 1],
                    eta_z: normals[o + 2],
                }
            });
            let features = std::array::from_fn(|w| {
                let values = if feat_dim > 0 {
                    let o = (i * N_WHEELS + w) * feat_dim;
                    feats[o..o + feat_dim].to_vec()
                } else {
                    Vec::new()
                };
                FeatureVector { values, valid: flags[i * N_WHEELS + w] > 0.0 }
            });
            queries.push(MapQuery { normals: q_normals, features, pre_encoded });
        }
        Ok(Trajectory {
            dt: dt[0],
            states: states
                .chunks_exact(6)
                .map(|c| VehicleState::from_array(c.try_into().unwrap()))
                .collect(),
            actuators: actuators
                .chunks_exact(4)
                .map(|c| ActuatorState::from_array(c.try_into().unwrap()))
                .collect(),
            controls: controls
                .chunks_exact(3)
                .map(|c| ControlInput::from_array(c.try_into().unwrap()))
                .collect(),
            queries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 0.02;

    /// Simulated parametric driving over a gentle analytic normal field,
    /// with random per-bucket features. Independent of the world module.
    fn synthetic_shard(rows: usize, n_pca: usize, n_buckets: usize, seed: u64) -> LogShard {
        let params = ParamSet::fit_init();
        let p = &params.terra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal_at = |x: f64, y: f64| {
            SurfaceNormal::from_raw(0.05 * (0.09 * x).sin(), 0.05 * (0.07 * y).cos(), 1.0)
        };
        let mut state = VehicleState::zero();
        let mut act = ActuatorState::at_rest(params.delay.rpm_map[0]);
        let mut shard = LogShard {
            dt: DT,
            n_pca,
            states: Vec::new(),
            actuators: Vec::new(),
            controls: Vec::new(),
            normals: Vec::new(),
            features: Vec::new(),
            validity: Vec::new(),
            n_buckets,
        };
        for i in 0..rows {
            let t = i as f64 * DT;
            let brake = if (i / 120) % 4 == 3 { 0.3 } else { 0.0 };
            let control = ControlInput::new(
                0.35 + 0.25 * (0.31 * t).sin(),
                brake,
                0.25 * (0.17 * t + 0.5).sin(),
            );
            let wheels = wheel_positions(&state, p.l_front, p.l_rear);
            let world: [SurfaceNormal<f64>; N_WHEELS] =
                std::array::from_fn(|w| normal_at(wheels[w][0], wheels[w][1]));
            shard.states.push(state.to_array());
            shard.actuators.push(act.to_array());
            shard.controls.push(control.to_array());
            shard
                .normals
                .push(std::array::from_fn(|w| [world[w].eta_x, world[w].eta_y, world[w].eta_z]));
            for _w in 0..N_WHEELS {
                for _b in 0..n_buckets {
                    shard.validity.push(if rng.random::<f64>() < 0.85 { 1 } else { -1 });
                    for _ in 0..n_pca {
                        shard.features.push(rng.random::<f32>() * 2.0 - 1.0);
                    }
                }
            }
            let normal = mean_normal_of(&world).to_body(state.phi);
            let forces = compute_forces(&state, &act, &control, &normal, p);
            let deriv = body_derivatives(&state, &forces, act.steer_angle, &normal, p);
            let next = euler_step(&state, &deriv, DT);
            act = step_actuators(&act, &control, state.v_x, &params.delay, params.max_steer, DT);
            state = next;
        }
        shard
    }

    fn zero_head2(model: &mut HybridModel) {
        for s in [model.nets.head2.w, model.nets.head2.b] {
            model.theta[s.offset..s.offset + s.len()].fill(0.0);
        }
    }

    fn stationary_history(model: &HybridModel) -> Vec<HistoryRow> {
        let row = HistoryRow {
            state: VehicleState::zero(),
            actuators: ActuatorState::at_rest(model.delay.rpm_map[0]),
            control: ControlInput::new(0.0, 0.0, 0.0),
            query: MapQuery::flat_missing(model),
        };
        vec![row; model.spec.tau_steps]
    }

    #[test]
    fn input_dims_per_mode() {
        assert_eq!(HybridSpec::new(FeatureMode::None, 0, 0).input_dim(), 17);
        assert_eq!(HybridSpec::new(FeatureMode::Direct, 40, 0).input_dim(), 17 + 4 * 41);
        assert_eq!(HybridSpec::new(FeatureMode::Compressed, 40, 4).input_dim(), 17 + 16);
        assert_eq!(HybridSpec::new(FeatureMode::None, 0, 0).window_rows(), 261);
    }

    #[test]
    fn feature_mode_parse_round_trip() {
        for m in [FeatureMode::None, FeatureMode::Direct, FeatureMode::Compressed] {
            assert_eq!(FeatureMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(FeatureMode::parse("bogus").is_err());
    }

    #[test]
    fn derivative_requires_warmup() {
        let model = HybridModel::new(HybridSpec::new(FeatureMode::None, 0, 0), 1).unwrap();
        let mut comp = Compensator::new(&model);
        let err = comp
            .compensated_derivative(
                &VehicleState::zero(),
                &ActuatorState::at_rest(600.0),
                &ControlInput::new(0.0, 0.0, 0.0),
                &MapQuery::flat_missing(&model),
            )
            .unwrap_err();
        assert!(matches!(err, TdError::UninitializedHidden));
    }

    #[test]
    fn warmup_rejects_wrong_window_length() {
        let model = HybridModel::new(HybridSpec::new(FeatureMode::None, 0, 0), 1).unwrap();
        let mut comp = Compensator::new(&model);
        let short = stationary_history(&model)[..4].to_vec();
        assert!(matches!(comp.warm_up(&short), Err(TdError::Shape(_))));
    }

    #[test]
    fn zero_compensator_matches_parametric_derivative() {
        let mut model = HybridModel::new(HybridSpec::new(FeatureMode::None, 0, 0), 11).unwrap();
        zero_head2(&mut model);
        let state = VehicleState { p_x: 3.0, p_y: -2.0, phi: 0.7, v_x: 4.0, v_y: 0.3, r: -0.2 };
        let act = ActuatorState {
            brake_pressure: 0.1,
            steer_angle: 0.05,
            steer_rate: -0.1,
            engine_rpm: 1500.0,
        };
        let control = ControlInput::new(0.5, 0.0, 0.2);
        let query = MapQuery {
            normals: [
                SurfaceNormal::from_raw(0.1, 0.0, 1.0),
                SurfaceNormal::from_raw(0.0, 0.1, 1.0),
                SurfaceNormal::from_raw(-0.05, 0.02, 1.0),
                SurfaceNormal::from_raw(0.03, -0.08, 1.0),
            ],
            features: std::array::from_fn(|_| model.missing_feature()),
            pre_encoded: false,
        };
        let mut comp = Compensator::new(&model);
        comp.warm_up(&stationary_history(&model)).unwrap();
        let (deriv, forces) = comp.compensated_derivative(&state, &act, &control, &query).unwrap();

        let p = model.terra_params();
        let normal = query.mean_normal().to_body(state.phi);
        let want_f = compute_forces(&state, &act, &control, &normal, &p);
        let want_d = body_derivatives(&state, &want_f, act.steer_angle, &normal, &p);
        assert_eq!(forces.f_x, want_f.f_x);
        assert_eq!(forces.f_yf, want_f.f_yf);
        assert_eq!(forces.f_yb, want_f.f_yb);
        assert_eq!(forces.f_r, want_f.f_r);
        assert_eq!(deriv.to_array(), want_d.to_array());
    }

    #[test]
    fn zero_compensator_rollout_equals_parametric_integration() {
        let mut model = HybridModel::new(HybridSpec::new(FeatureMode::None, 0, 0), 3).unwrap();
        zero_head2(&mut model);
        let shard = synthetic_shard(300, 2, 3, 17);
        let win = TeacherWindow::new(&shard, 7, 1, &model.spec);
        let got = rollout_teacher_f64(&model, &win).unwrap();

        let p = model.terra_params();
        let mut state = win.state(10);
        let mut act = win.actuators(10);
        for (t, predicted) in got.iter().enumerate() {
            let row = 10 + t;
            let control = win.control(row);
            let raw = &shard.normals[7 + row];
            let world = std::array::from_fn(|w| SurfaceNormal {
                eta_x: raw[w][0],
                eta_y: raw[w][1],
                eta_z: raw[w][2],
            });
            let normal = mean_normal_of(&world).to_body(state.phi);
            let forces = compute_forces(&state, &act, &control, &normal, &p);
            let deriv = body_derivatives(&state, &forces, act.steer_angle, &normal, &p);
            let next = euler_step(&state, &deriv, DT);
            act = step_actuators(&act, &control, state.v_x, &model.delay, model.max_steer, DT);
            state = next;
            assert_eq!(predicted.to_array(), state.to_array(), "step {t}");
        }
    }

    #[test]
    fn zero_output_encoder_reduces_to_featureless_model() {
        let mut spec_c = HybridSpec::new(FeatureMode::Compressed, 3, 2);
        spec_c.horizon_steps = 40;
        let mut spec_n = HybridSpec::new(FeatureMode::None, 0, 0);
        spec_n.horizon_steps = 40;
        let mut c = HybridModel::new(spec_c, 21).unwrap();
        let mut n = HybridModel::new(spec_n, 22).unwrap();
        c.feature_mean = vec![0.2, -0.1, 0.4];

        // Silence the encoder, then transplant every shared weight from the
        // compressed model into the featureless one. LSTM input weights
        // keep only the 17 base columns.
        for s in [c.nets.encoder.unwrap().l3.w, c.nets.encoder.unwrap().l3.b] {
            c.theta[s.offset..s.offset + s.len()].fill(0.0);
        }
        let n_in_c = c.spec.input_dim();
        for (dst, src) in [
            (n.nets.init_lstm.wx, c.nets.init_lstm.wx),
            (n.nets.pred_lstm.wx, c.nets.pred_lstm.wx),
        ] {
            for row in 0..dst.rows {
                let d = dst.offset + row * BASE_INPUT_DIM;
                let s = src.offset + row * n_in_c;
                let col: Vec<f64> = c.theta[s..s + BASE_INPUT_DIM].to_vec();
                n.theta[d..d + BASE_INPUT_DIM].copy_from_slice(&col);
            }
        }
        for (dst, src) in [
            (n.nets.init_lstm.wh, c.nets.init_lstm.wh),
            (n.nets.init_lstm.b, c.nets.init_lstm.b),
            (n.nets.init_head.w, c.nets.init_head.w),
            (n.nets.init_head.b, c.nets.init_head.b),
            (n.nets.pred_lstm.wh, c.nets.pred_lstm.wh),
            (n.nets.pred_lstm.b, c.nets.pred_lstm.b),
            (n.nets.head1.w, c.nets.head1.w),
            (n.nets.head1.b, c.nets.head1.b),
            (n.nets.head2.w, c.nets.head2.w),
            (n.nets.head2.b, c.nets.head2.b),
            (n.nets.terra, c.nets.terra),
        ] {
            let col: Vec<f64> = c.theta[src.offset..src.offset + src.len()].to_vec();
            n.theta[dst.offset..dst.offset + dst.len()].copy_from_slice(&col);
        }

        let shard = synthetic_shard(120, 3, 4, 31);
        let win_c = TeacherWindow::new(&shard, 12, 2, &c.spec);
        let win_n = TeacherWindow::new(&shard, 12, 2, &n.spec);
        let got_c = rollout_teacher_f64(&c, &win_c).unwrap();
        let got_n = rollout_teacher_f64(&n, &win_n).unwrap();
        for (a, b) in got_c.iter().zip(&got_n) {
            assert_eq!(a.to_array(), b.to_array());
        }
    }

    #[test]
    fn stationary_equilibrium_stays_at_rest() {
        let mut model = HybridModel::new(HybridSpec::new(FeatureMode::None, 0, 0), 2).unwrap();
        zero_head2(&mut model);
        // Kill the idle-creep intercept so zero throttle means zero drive.
        model.theta[model.nets.terra.offset + 20] = 0.0;
        let history = stationary_history(&model);
        let controls = vec![ControlInput::new(0.0, 0.0, 0.0); 100];
        let states = rollout_runtime(
            &model,
            &history,
            &VehicleState::zero(),
            &ActuatorState::at_rest(model.delay.rpm_map[0]),
            &controls,
            |_, _| MapQuery::flat_missing(&model),
        )
        .unwrap();
        for s in &states {
            assert_eq!(s.to_array(), [0.0; 6]);
        }
    }

    #[test]
    fn constant_throttle_velocity_matches_longitudinal_oracle() {
        let mut model = HybridModel::new(HybridSpec::new(FeatureMode::None, 0, 0), 4).unwrap();
        zero_head2(&mut model);
        let history = stationary_history(&model);
        let throttle = 0.6;
        let controls = vec![ControlInput::new(throttle, 0.0, 0.0); 200];
        let states = rollout_runtime(
            &model,
            &history,
            &VehicleState::zero(),
            &ActuatorState::at_rest(model.delay.rpm_map[0]),
            &controls,
            |_, _| MapQuery::flat_missing(&model),
        )
        .unwrap();

        // Independent longitudinal integration: straight driving on flat
        // ground reduces to v and engine speed.
        let p = model.terra_params();
        let d = model.delay;
        let mut v = 0.0_f64;
        let mut rpm = d.rpm_map[0];
        let mut prev_v = -1.0;
        for (t, s) in states.iter().enumerate() {
            let kr = rpm / 1000.0;
            let drive = (p.engine_rpm[0] + p.engine_rpm[1] * kr + p.engine_rpm[2] * kr * kr)
                * (p.engine_throttle[0]
                    + p.engine_throttle[1] * throttle
                    + p.engine_throttle[2] * throttle * throttle);
            let beta = p.beta_scale * (p.beta_slope * v).tanh();
            let acc = 2.0 * (drive - beta) / p.mass - p.c_drag_x * v * v;
            let target = (d.rpm_map[0]
                + d.rpm_map[1] * throttle
                + d.rpm_map[2] * v
                + d.rpm_map[3] * v * throttle)
                .max(0.0);
            let decay = (-DT / d.rpm_tc).exp();
            rpm = rpm * decay + target * (1.0 - decay);
            v += acc * DT;

            assert!((s.v_x - v).abs() <= 1e-9 * v.max(1.0), "step {t}: {} vs {v}", s.v_x);
            assert_eq!(s.v_y, 0.0);
            assert_eq!(s.r, 0.0);
            assert!(s.v_x >= prev_v - 1e-12, "v_x not monotone at step {t}");
            prev_v = s.v_x;
        }
        assert!(states.last().unwrap().v_x > 1.0);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let model = HybridModel::new(HybridSpec::new(FeatureMode::Direct, 3, 0), 5).unwrap();
        let shard = synthetic_shard(300, 3, 2, 23);
        let win = TeacherWindow::new(&shard, 19, 1, &model.spec);
        let a = rollout_teacher_f64(&model, &win).unwrap();
        let b = rollout_teacher_f64(&model, &win).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_array(), y.to_array());
        }
    }

    #[test]
    fn per_wheel_features_change_the_derivative() {
        let model = HybridModel::new(HybridSpec::new(FeatureMode::Direct, 2, 0), 5).unwrap();
        let state = VehicleState { p_x: 0.0, p_y: 0.0, phi: 0.2, v_x: 3.0, v_y: 0.1, r: 0.05 };
        let act = ActuatorState {
            brake_pressure: 0.0,
            steer_angle: 0.1,
            steer_rate: 0.0,
            engine_rpm: 1200.0,
        };
        let control = ControlInput::new(0.4, 0.0, 0.1);
        let wheel_values =
            [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]];
        let distinct = MapQuery {
            normals: [SurfaceNormal::flat(); N_WHEELS],
            features: std::array::from_fn(|w| FeatureVector::observed(wheel_values[w].clone())),
            pre_encoded: false,
        };
        let uniform = MapQuery {
            normals: [SurfaceNormal::flat(); N_WHEELS],
            features: std::array::from_fn(|_| FeatureVector::observed(wheel_values[0].clone())),
            pre_encoded: false,
        };
        let run = |query: &MapQuery| {
            let mut comp = Compensator::new(&model);
            comp.warm_up(&stationary_history(&model)).unwrap();
            comp.compensated_derivative(&state, &act, &control, query).unwrap().0
        };
        let da = run(&distinct).to_array();
        let db = run(&uniform).to_array();
        let diff: f64 = da.iter().zip(&db).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-12, "distinct wheel features did not change the derivative");
    }

    #[test]
    fn tape_rollout_matches_f64_rollout() {
        let mut model = HybridModel::new(HybridSpec::new(FeatureMode::Compressed, 3, 2), 9).unwrap();
        model.feature_mean = vec![0.1, -0.2, 0.3];
        let shard = synthetic_shard(400, 3, 4, 42);
        let win = TeacherWindow::new(&shard, 60, 3, &model.spec);
        let plain = rollout_teacher_f64(&model, &win).unwrap();

        let tape = Tape::with_capacity(60_000, 400_000);
        let taped = rollout_teacher_tape(&tape, &model.theta, &model, &win);
        assert_eq!(plain.len(), taped.len());
        for (t, (a, b)) in plain.iter().zip(&taped).enumerate() {
            let av = a.to_array();
            let bv = [
                b.p_x.value(),
                b.p_y.value(),
                b.phi.value(),
                b.v_x.value(),
                b.v_y.value(),
                b.r.value(),
            ];
            for k in 0..6 {
                let tol = 1e-9 * av[k].abs().max(1.0);
                assert!(
                    (av[k] - bv[k]).abs() <= tol,
                    "step {t} component {k}: {} vs {}",
                    av[k],
                    bv[k]
                );
            }
        }
    }

    #[test]
    fn chunked_tape_rollout_matches_full_forward_pass() {
        let mut spec = HybridSpec::new(FeatureMode::Compressed, 2, 2);
        spec.horizon_steps = 60;
        let mut model = HybridModel::new(spec, 8).unwrap();
        model.feature_mean = vec![0.2, -0.3];
        let shard = synthetic_shard(120, 2, 2, 19);
        let win = TeacherWindow::new(&shard, 10, 1, &model.spec);

        let tape = Tape::with_capacity(30_000, 200_000);
        let full = rollout_teacher_tape(&tape, &model.theta, &model, &win);

        let mut chunked = Vec::new();
        let mut carry: Option<TapeCarry> = None;
        for (start, len) in [(0, 25), (25, 25), (50, 10)] {
            let t = Tape::with_capacity(15_000, 100_000);
            let (states, next) = rollout_teacher_tape_chunk(
                &t,
                &model.theta,
                &model,
                &win,
                start,
                len,
                carry.as_ref(),
            );
            chunked.extend(states.iter().map(|s| {
                [
                    s.p_x.value(),
                    s.p_y.value(),
                    s.phi.value(),
                    s.v_x.value(),
                    s.v_y.value(),
                    s.r.value(),
                ]
            }));
            carry = Some(next);
        }
        assert_eq!(full.len(), chunked.len());
        for (a, b) in full.iter().zip(&chunked) {
            let av = [
                a.p_x.value(),
                a.p_y.value(),
                a.phi.value(),
                a.v_x.value(),
                a.v_y.value(),
                a.r.value(),
            ];
            for k in 0..6 {
                assert!((av[k] - b[k]).abs() <= 1e-12 * av[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn short_rollout_gradients_match_finite_differences() {
        let mut spec = HybridSpec::new(FeatureMode::Compressed, 2, 2);
        spec.horizon_steps = 20;
        let mut model = HybridModel::new(spec, 13).unwrap();
        model.feature_mean = vec![0.05, -0.1];
        let shard = synthetic_shard(80, 2, 2, 7);

        let loss_f64 = |m: &HybridModel| -> f64 {
            let win = TeacherWindow::new(&shard, 3, 1, &m.spec);
            rollout_teacher_f64(m, &win)
                .unwrap()
                .iter()
                .map(|s| s.to_array().iter().map(|v| v * v).sum::<f64>())
                .sum()
        };

        let tape = Tape::with_capacity(20_000, 200_000);
        let win = TeacherWindow::new(&shard, 3, 1, &model.spec);
        let states = rollout_teacher_tape(&tape, &model.theta, &model, &win);
        let mut loss = tape.constant(0.0);
        for s in &states {
            loss = loss
                + s.p_x.square()
                + s.p_y.square()
                + s.phi.square()
                + s.v_x.square()
                + s.v_y.square()
                + s.r.square();
        }
        let mut grad = vec![0.0; model.layout.total_len()];
        tape.backward_into(loss, &mut grad);

        let nets = &model.nets;
        let enc = nets.encoder.as_ref().unwrap();
        let picks = [
            nets.terra.offset,          // d_rear
            nets.terra.offset + 16,     // mass
            nets.terra.offset + 26,     // beta_scale
            enc.l1.w.offset + 1,
            enc.l3.b.offset,
            nets.init_lstm.wx.offset + 5,
            nets.init_head.w.offset + 3,
            nets.pred_lstm.wx.offset + 7,
            nets.pred_lstm.wh.offset + 2,
            nets.head1.w.offset + 4,
            nets.head2.w.offset + 1,
            nets.head2.b.offset,
        ];
        let h = 1e-4;
        for &i in &picks {
            let mut m = model.clone();
            m.theta[i] += h;
            let up = loss_f64(&m);
            m.theta[i] = model.theta[i] - h;
            let dn = loss_f64(&m);
            let fd = (up - dn) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / (grad[i].abs() + fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: tape {} vs fd {fd}, rel {rel}", grad[i]);
        }
    }

    #[test]
    fn model_save_load_round_trip() {
        let dir = std::env::temp_dir().join("td_hybrid_model_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut model =
            HybridModel::new(HybridSpec::new(FeatureMode::Compressed, 3, 2), 77).unwrap();
        model.feature_mean = vec![0.5, -0.25, 0.125];
        model.delay.brake_tc = 0.21;
        let path = dir.join("model.bin");
        model.save(&path).unwrap();
        let loaded = HybridModel::load(&path).unwrap();
        assert_eq!(model.theta, loaded.theta);
        assert_eq!(model.feature_mean, loaded.feature_mean);
        assert_eq!(model.delay.to_vec(), loaded.delay.to_vec());
        assert_eq!(model.max_steer, loaded.max_steer);
        assert_eq!(model.spec.input_dim(), loaded.spec.input_dim());

        let shard = synthetic_shard(300, 3, 2, 55);
        let win = TeacherWindow::new(&shard, 4, 0, &model.spec);
        let a = rollout_teacher_f64(&model, &win).unwrap();
        let b = rollout_teacher_f64(&loaded, &win).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_array(), y.to_array());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn trajectory_save_load_round_trip() {
        let dir = std::env::temp_dir().join("td_hybrid_traj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 25;
        let mut traj = Trajectory {
            dt: DT,
            states: Vec::new(),
            actuators: Vec::new(),
            controls: Vec::new(),
            queries: Vec::new(),
        };
        for _ in 0..n {
            traj.states.push(VehicleState {
                p_x: rng.random::<f64>(),
                p_y: rng.random::<f64>(),
                phi: rng.random::<f64>() - 0.5,
                v_x: rng.random::<f64>() * 5.0,
                v_y: rng.random::<f64>() - 0.5,
                r: rng.random::<f64>() - 0.5,
            });
            traj.actuators.push(ActuatorState {
                brake_pressure: rng.random::<f64>(),
                steer_angle: rng.random::<f64>() - 0.5,
                steer_rate: rng.random::<f64>() - 0.5,
                engine_rpm: rng.random::<f64>() * 2000.0,
            });
            traj.controls.push(ControlInput::new(
                rng.random::<f64>(),
                0.0,
                rng.random::<f64>() - 0.5,
            ));
            traj.queries.push(MapQuery {
                normals: std::array::from_fn(|_| {
                    SurfaceNormal::from_raw(
                        0.1 * (rng.random::<f64>() - 0.5),
                        0.1 * (rng.random::<f64>() - 0.5),
                        1.0,
                    )
                }),
                features: std::array::from_fn(|_| {
                    let values = vec![rng.random::<f64>(), rng.random::<f64>()];
                    if rng.random::<f64>() < 0.8 {
                        FeatureVector::observed(values)
                    } else {
                        FeatureVector::missing(&values)
                    }
                }),
                pre_encoded: false,
            });
        }
        let path = dir.join("traj.bin");
        traj.save(&path).unwrap();
        let loaded = Trajectory::load(&path).unwrap();
        assert_eq!(loaded.dt, traj.dt);
        assert_eq!(loaded.states.len(), n);
        for i in 0..n {
            assert_eq!(loaded.states[i].to_array(), traj.states[i].to_array());
            assert_eq!(loaded.actuators[i].to_array(), traj.actuators[i].to_array());
            assert_eq!(loaded.controls[i].to_array(), traj.controls[i].to_array());
            for w in 0..N_WHEELS {
                assert_eq!(loaded.queries[i].features[w].values, traj.queries[i].features[w].values);
                assert_eq!(loaded.queries[i].features[w].valid, traj.queries[i].features[w].valid);
                assert_eq!(loaded.queries[i].normals[w].eta_x, traj.queries[i].normals[w].eta_x);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn wheel_positions_geometry() {
        let mut s = VehicleState::zero();
        s.p_x = 2.0;
        s.p_y = -1.0;
        let w = wheel_positions(&s, 1.4, 1.6);
        let want = [[3.4, -0.2], [3.4, -1.8], [0.4, -0.2], [0.4, -1.8]];
        for (got, exp) in w.iter().zip(&want) {
            assert!((got[0] - exp[0]).abs() < 1e-12 && (got[1] - exp[1]).abs() < 1e-12);
        }

        s.phi = std::f64::consts::FRAC_PI_2;
        let w = wheel_positions(&s, 1.4, 1.6);
        assert!((w[0][0] - (2.0 - 0.8)).abs() < 1e-12);
        assert!((w[0][1] - (-1.0 + 1.4)).abs() < 1e-12);
    }
}
