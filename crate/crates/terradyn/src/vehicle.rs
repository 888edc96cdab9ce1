//! Parametric single-track vehicle model with actuator-delay states.
//!
//! The model splits into a force stage (modified Pacejka lateral forces, a
//! polynomial drivetrain, rolling resistance) and a kinematic stage that
//! converts forces to body-frame accelerations and integrates them with
//! forward Euler. Everything is generic over [`Scalar`] so the same code
//! runs as plain `f64` during simulation and planning and as tape variables
//! during training.

use crate::tape::Scalar;

/// Number of terradynamics constants in the canonical flat layout.
pub const N_TERRA: usize = 28;
/// Number of actuator-delay constants in the canonical flat layout.
pub const N_DELAY: usize = 8;

/// Vehicle state: inertial position, yaw, body-frame velocities, yaw rate.
#[derive(Clone, Copy, Debug)]
pub struct VehicleState<S> {
    pub p_x: S,
    pub p_y: S,
    pub phi: S,
    pub v_x: S,
    pub v_y: S,
    pub r: S,
}

impl VehicleState<f64> {
    pub fn zero() -> Self {
        VehicleState { p_x: 0.0, p_y: 0.0, phi: 0.0, v_x: 0.0, v_y: 0.0, r: 0.0 }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.p_x, self.p_y, self.phi, self.v_x, self.v_y, self.r]
    }

    pub fn from_array(a: &[f64; 6]) -> Self {
        VehicleState { p_x: a[0], p_y: a[1], phi: a[2], v_x: a[3], v_y: a[4], r: a[5] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Delayed actuator states: brake pressure, steering position and rate,
/// engine RPM.
#[derive(Clone, Copy, Debug)]
pub struct ActuatorState<S> {
    pub brake_pressure: S,
    pub steer_angle: S,
    pub steer_rate: S,
    pub engine_rpm: S,
}

impl ActuatorState<f64> {
    pub fn at_rest(idle_rpm: f64) -> Self {
        ActuatorState { brake_pressure: 0.0, steer_angle: 0.0, steer_rate: 0.0, engine_rpm: idle_rpm }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.brake_pressure, self.steer_angle, self.steer_rate, self.engine_rpm]
    }

    pub fn from_array(a: &[f64; 4]) -> Self {
        ActuatorState { brake_pressure: a[0], steer_angle: a[1], steer_rate: a[2], engine_rpm: a[3] }
    }
}

/// Commanded inputs; clamped to their valid ranges on construction.
#[derive(Clone, Copy, Debug, Default)]
pub struct ControlInput {
    pub throttle: f64,
    pub brake_cmd: f64,
    pub steer_cmd: f64,
}

impl ControlInput {
    pub fn new(throttle: f64, brake_cmd: f64, steer_cmd: f64) -> Self {
        ControlInput {
            throttle: throttle.clamp(0.0, 1.0),
            brake_cmd: brake_cmd.clamp(0.0, 1.0),
            steer_cmd,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.throttle, self.brake_cmd, self.steer_cmd]
    }

    pub fn from_array(a: &[f64; 3]) -> Self {
        ControlInput::new(a[0], a[1], a[2])
    }
}

/// Forces produced by the parametric model (and optionally corrected by the
/// learned compensator): longitudinal per-wheel force, front/rear lateral
/// forces, and the yaw-rate derivative proxy.
#[derive(Clone, Copy, Debug)]
pub struct ForceVector<S> {
    pub f_x: S,
    pub f_yf: S,
    pub f_yb: S,
    pub f_r: S,
}

/// Ground surface normal in body frame, averaged over the wheels.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceNormal<S> {
    pub eta_x: S,
    pub eta_y: S,
    pub eta_z: S,
}

impl SurfaceNormal<f64> {
    /// Normalize a raw upward-facing normal. Panics on a degenerate or
    /// downward vector; map cells always produce valid ones.
    pub fn from_raw(x: f64, y: f64, z: f64) -> Self {
        let n = (x * x + y * y + z * z).sqrt();
        assert!(n > 1e-9 && z > 0.0, "degenerate surface normal ({x}, {y}, {z})");
        SurfaceNormal { eta_x: x / n, eta_y: y / n, eta_z: z / n }
    }

    pub fn flat() -> Self {
        SurfaceNormal { eta_x: 0.0, eta_y: 0.0, eta_z: 1.0 }
    }
}

impl<S: Scalar> SurfaceNormal<S> {
    /// Rotate a world-frame normal into the body frame of a vehicle with
    /// yaw `phi`. The vertical component is unchanged.
    pub fn to_body(&self, phi: S) -> Self {
        let (c, s) = (phi.cos(), phi.sin());
        SurfaceNormal {
            eta_x: self.eta_x * c + self.eta_y * s,
            eta_y: self.eta_y * c - self.eta_x * s,
            eta_z: self.eta_z,
        }
    }
}

/// Terradynamics constants: everything the stage-two optimizer trains.
///
/// `engine_rpm` takes the RPM divided by 1000 as its polynomial input so
/// all coefficients live on comparable scales.
#[derive(Clone, Copy, Debug)]
pub struct TerraParams<S> {
    // Pacejka lateral-force constants, rear and front.
    pub d_rear: S,
    pub c_rear: S,
    pub b_rear: S,
    pub d_front: S,
    pub c_front: S,
    pub b_front: S,
    // Geometry: distances from CoG to rear/front axle (m).
    pub l_rear: S,
    pub l_front: S,
    // Stiffness floor for the slip-angle denominator (m/s).
    pub c_max: S,
    // Yaw response: speed normalization, gain, damping.
    pub c_l: S,
    pub c_yaw: S,
    pub c_yaw_damp: S,
    // Quadratic drag and gravity-projection coefficients.
    pub c_drag_x: S,
    pub c_drag_y: S,
    pub c_grav_x: S,
    pub c_grav_y: S,
    pub mass: S,
    // Drivetrain polynomials P(x_rpm/1000), P(u_th), P(x_br).
    pub engine_rpm: [S; 3],
    pub engine_throttle: [S; 3],
    pub brake: [S; 3],
    // Rolling resistance beta(v_x) = scale * tanh(slope * v_x).
    pub beta_scale: S,
    pub beta_slope: S,
}

/// Canonical flat ordering of [`TerraParams`], used by the trainable
/// parameter vector and the key-value serialization.
pub const TERRA_NAMES: [&str; N_TERRA] = [
    "d_rear",
    "c_rear",
    "b_rear",
    "d_front",
    "c_front",
    "b_front",
    "l_rear",
    "l_front",
    "c_max",
    "c_l",
    "c_yaw",
    "c_yaw_damp",
    "c_drag_x",
    "c_drag_y",
    "c_grav_x",
    "c_grav_y",
    "mass",
    "engine_rpm.0",
    "engine_rpm.1",
    "engine_rpm.2",
    "engine_throttle.0",
    "engine_throttle.1",
    "engine_throttle.2",
    "brake.0",
    "brake.1",
    "brake.2",
    "beta_scale",
    "beta_slope",
];

impl<S: Copy> TerraParams<S> {
    pub fn from_slice(v: &[S]) -> Self {
        assert_eq!(v.len(), N_TERRA);
        TerraParams {
            d_rear: v[0],
            c_rear: v[1],
            b_rear: v[2],
            d_front: v[3],
            c_front: v[4],
            b_front: v[5],
            l_rear: v[6],
            l_front: v[7],
            c_max: v[8],
            c_l: v[9],
            c_yaw: v[10],
            c_yaw_damp: v[11],
            c_drag_x: v[12],
            c_drag_y: v[13],
            c_grav_x: v[14],
            c_grav_y: v[15],
            mass: v[16],
            engine_rpm: [v[17], v[18], v[19]],
            engine_throttle: [v[20], v[21], v[22]],
            brake: [v[23], v[24], v[25]],
            beta_scale: v[26],
            beta_slope: v[27],
        }
    }

    pub fn to_vec(&self) -> Vec<S> {
        vec![
            self.d_rear,
            self.c_rear,
            self.b_rear,
            self.d_front,
            self.c_front,
            self.b_front,
            self.l_rear,
            self.l_front,
            self.c_max,
            self.c_l,
            self.c_yaw,
            self.c_yaw_damp,
            self.c_drag_x,
            self.c_drag_y,
            self.c_grav_x,
            self.c_grav_y,
            self.mass,
            self.engine_rpm[0],
            self.engine_rpm[1],
            self.engine_rpm[2],
            self.engine_throttle[0],
            self.engine_throttle[1],
            self.engine_throttle[2],
            self.brake[0],
            self.brake[1],
            self.brake[2],
            self.beta_scale,
            self.beta_slope,
        ]
    }
}

/// Actuator-delay constants: fit once against logged actuator responses and
/// held fixed during terradynamics training.
///
/// `rpm_map` is the static RPM target `max(0, c0 + c1 u_th + c2 v_x +
/// c3 u_th v_x)`.
#[derive(Clone, Copy, Debug)]
pub struct DelayParams<S> {
    pub brake_tc: S,
    pub steer_stiffness: S,
    pub steer_damping: S,
    pub rpm_tc: S,
    pub rpm_map: [S; 4],
}

pub const DELAY_NAMES: [&str; N_DELAY] = [
    "brake_tc",
    "steer_stiffness",
    "steer_damping",
    "rpm_tc",
    "rpm_map.0",
    "rpm_map.1",
    "rpm_map.2",
    "rpm_map.3",
];

impl<S: Copy> DelayParams<S> {
    pub fn from_slice(v: &[S]) -> Self {
        assert_eq!(v.len(), N_DELAY);
        DelayParams {
            brake_tc: v[0],
            steer_stiffness: v[1],
            steer_damping: v[2],
            rpm_tc: v[3],
            rpm_map: [v[4], v[5], v[6], v[7]],
        }
    }

    pub fn to_vec(&self) -> Vec<S> {
        vec![
            self.brake_tc,
            self.steer_stiffness,
            self.steer_damping,
            self.rpm_tc,
            self.rpm_map[0],
            self.rpm_map[1],
            self.rpm_map[2],
            self.rpm_map[3],
        ]
    }
}

/// Complete parameter set for one vehicle: terradynamics constants, delay
/// constants, and the mechanical steering limit.
#[derive(Clone, Copy, Debug)]
pub struct ParamSet {
    pub terra: TerraParams<f64>,
    pub delay: DelayParams<f64>,
    pub max_steer: f64,
}

impl ParamSet {
    /// Initialization used before fitting: plausible mid-size vehicle
    /// constants that integrate stably. The lateral peaks are negative so
    /// the axle forces oppose slip under this slip-angle sign convention;
    /// a positive peak feeds lateral velocity back on itself.
    pub fn fit_init() -> Self {
        ParamSet {
            terra: TerraParams {
                d_rear: -4000.0,
                c_rear: 1.5,
                b_rear: 5.0,
                d_front: -4000.0,
                c_front: 1.5,
                b_front: 5.0,
                l_rear: 1.5,
                l_front: 1.5,
                c_max: 0.5,
                c_l: 3.0,
                c_yaw: 1.0,
                c_yaw_damp: 1.0,
                c_drag_x: 0.008,
                c_drag_y: 0.05,
                c_grav_x: 9.0,
                c_grav_y: 9.0,
                mass: 1500.0,
                engine_rpm: [150.0, 700.0, 50.0],
                engine_throttle: [0.1, 0.8, 0.1],
                brake: [0.0, 2000.0, 400.0],
                beta_scale: 200.0,
                beta_slope: 1.0,
            },
            delay: DelayParams {
                brake_tc: 0.15,
                steer_stiffness: 20.0,
                steer_damping: 8.0,
                rpm_tc: 0.4,
                rpm_map: [600.0, 2000.0, 20.0, 100.0],
            },
            max_steer: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), crate::TdError> {
        let t = &self.terra;
        let all = [t.to_vec(), self.delay.to_vec(), vec![self.max_steer]].concat();
        if !all.iter().all(|x| x.is_finite()) {
            return Err(crate::TdError::Invalid("non-finite vehicle parameter".into()));
        }
        if t.c_max <= 0.0 || t.mass <= 0.0 || t.l_rear <= 0.0 || t.l_front <= 0.0 {
            return Err(crate::TdError::Invalid(
                "c_max, mass, l_rear, l_front must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Quadratic polynomial with learned coefficients and a plain-number input.
fn poly2<S: Scalar>(c: &[S; 3], x: S) -> S {
    c[0] + c[1] * x + c[2] * x.square()
}

fn poly2_cmd<S: Scalar>(c: &[S; 3], x: f64) -> S {
    c[0] + c[1] * x + c[2] * (x * x)
}

/// Front and rear slip angles. The denominator is floored at `c_max` so the
/// angles stay defined at standstill.
pub fn compute_slip_angles<S: Scalar>(
    state: &VehicleState<S>,
    steer_angle: S,
    p: &TerraParams<S>,
) -> (S, S) {
    let denom = p.c_max.maximum(state.v_x);
    let alpha_r = ((state.v_y - p.l_rear * state.r) / denom).atan();
    let alpha_f = ((state.v_y + p.l_front * state.r) / denom).atan() - steer_angle;
    (alpha_r, alpha_f)
}

/// Force stage of the parametric model.
///
/// Longitudinal: `F_x = (P(x_rpm) P(u_th) - P(x_br) - beta(v_x)) eta_z`.
/// Lateral: modified Pacejka `D sin(C tanh(B alpha)) eta_z` per axle.
/// Yaw: `F_r = (v_x / C_L) delta C_yaw - C_yaw_damp r`.
pub fn compute_forces<S: Scalar>(
    state: &VehicleState<S>,
    actuators: &ActuatorState<S>,
    control: &ControlInput,
    normal: &SurfaceNormal<S>,
    p: &TerraParams<S>,
) -> ForceVector<S> {
    let (alpha_r, alpha_f) = compute_slip_angles(state, actuators.steer_angle, p);
    let drive = poly2(&p.engine_rpm, actuators.engine_rpm * (1.0 / 1000.0))
        * poly2_cmd(&p.engine_throttle, control.throttle);
    let beta = p.beta_scale * (p.beta_slope * state.v_x).tanh();
    let f_x = (drive - poly2(&p.brake, actuators.brake_pressure) - beta) * normal.eta_z;
    let f_yb = p.d_rear * (p.c_rear * (p.b_rear * alpha_r).tanh()).sin() * normal.eta_z;
    let f_yf = p.d_front * (p.c_front * (p.b_front * alpha_f).tanh()).sin() * normal.eta_z;
    let f_r = (state.v_x / p.c_l) * actuators.steer_angle * p.c_yaw - p.c_yaw_damp * state.r;
    ForceVector { f_x, f_yf, f_yb, f_r }
}

/// Kinematic stage: forces to body-frame accelerations plus the planar
/// rotation of velocity into inertial position rates.
pub fn body_derivatives<S: Scalar>(
    state: &VehicleState<S>,
    forces: &ForceVector<S>,
    steer_angle: S,
    normal: &SurfaceNormal<S>,
    p: &TerraParams<S>,
) -> VehicleState<S> {
    let (sd, cd) = (steer_angle.sin(), steer_angle.cos());
    let v_x_dot = (forces.f_x * (cd + 1.0) - forces.f_yf * sd) / p.mass
        - p.c_drag_x * state.v_x.square()
        - p.c_grav_x * normal.eta_x
        + state.v_y * state.r;
    let v_y_dot = (forces.f_yb + forces.f_yf * cd + forces.f_x * sd) / p.mass
        - p.c_drag_y * state.v_y.square()
        - p.c_grav_y * normal.eta_y
        - state.v_x * state.r;
    let (sin_phi, cos_phi) = (state.phi.sin(), state.phi.cos());
    VehicleState {
        p_x: cos_phi * state.v_x - sin_phi * state.v_y,
        p_y: sin_phi * state.v_x + cos_phi * state.v_y,
        phi: state.r,
        v_x: v_x_dot,
        v_y: v_y_dot,
        r: forces.f_r,
    }
}

/// Forward Euler step; yaw is re-wrapped to (-pi, pi].
pub fn euler_step<S: Scalar>(
    state: &VehicleState<S>,
    derivative: &VehicleState<S>,
    dt: f64,
) -> VehicleState<S> {
    VehicleState {
        p_x: state.p_x + derivative.p_x * dt,
        p_y: state.p_y + derivative.p_y * dt,
        phi: (state.phi + derivative.phi * dt).wrap_pi(),
        v_x: state.v_x + derivative.v_x * dt,
        v_y: state.v_y + derivative.v_y * dt,
        r: state.r + derivative.r * dt,
    }
}

/// Advance the actuator-delay states by one step: first-order lags for
/// brake pressure and engine RPM, second-order tracking for steering.
pub fn step_actuators<S: Scalar>(
    actuators: &ActuatorState<S>,
    control: &ControlInput,
    v_x: S,
    delay: &DelayParams<S>,
    max_steer: f64,
    dt: f64,
) -> ActuatorState<S> {
    let brake_decay = (delay.brake_tc.recip() * -dt).exp();
    let brake_pressure =
        actuators.brake_pressure * brake_decay + (-brake_decay + 1.0) * control.brake_cmd;

    let accel = (-actuators.steer_angle + control.steer_cmd) * delay.steer_stiffness
        - delay.steer_damping * actuators.steer_rate;
    let steer_rate = actuators.steer_rate + accel * dt;
    let steer_angle =
        (actuators.steer_angle + steer_rate * dt).clamp_c(-max_steer, max_steer);

    let target = (delay.rpm_map[2] * v_x + delay.rpm_map[3] * (v_x * control.throttle)
        + (delay.rpm_map[0] + delay.rpm_map[1] * control.throttle))
        .max_c(0.0);
    let rpm_decay = (delay.rpm_tc.recip() * -dt).exp();
    let engine_rpm = actuators.engine_rpm * rpm_decay + target * (-rpm_decay + 1.0);

    ActuatorState { brake_pressure, steer_angle, steer_rate, engine_rpm }
}
