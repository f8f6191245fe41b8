//! Quadrotor rigid-body dynamics, motor mixing and flight scenario generation.
//!
//! The dynamics follow the Newton-Euler model
//!
//! ```text
//! ṗ = v            m·v̇ = m·g + R·(0, 0, f) + f_a
//! Ṙ = R·S(ω)       J·ω̇ = J·ω × ω + τ
//! ```
//!
//! with the wrench `(f, τ) = B0·u` produced by the squared motor speeds `u`.
//! Every entry of the first row of `B0` equals the thrust coefficient
//! `kappa_f`, so `Σuᵢ = f / kappa_f` regardless of the torques.
//!
//! Scenario tracks are generated kinematically; the integrator is used to
//! validate the model and is not part of track generation.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::downwash::{ellipsoid_margin, EllipsoidSpec};
use crate::geometry::{CameraIntrinsics, CameraModel, PitchLabel, Pose, PoseTrack, RobotGeometry, Rotation, Vec3};
use crate::GRAVITY;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("wrench is infeasible: motor command {0:?} has a negative component")]
    InfeasibleWrench([f64; 4]),
    #[error("actuation matrix is singular")]
    SingularActuation,
    #[error("invalid quadrotor parameters: {0}")]
    InvalidParams(String),
    #[error("time step {0} s outside (0, 0.01]")]
    InvalidTimeStep(f64),
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
}

/// Physical parameters of one quadrotor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    /// Thrust per squared motor speed, N/(krad/s)².
    pub kappa_f: f64,
    /// Maps squared motor speeds to `(f, τx, τy, τz)`.
    pub actuation: Matrix4<f64>,
    pub ellipsoid: EllipsoidSpec,
    pub geometry: RobotGeometry,
}

impl QuadrotorParams {
    /// Crazyflie 2.1 class vehicle carrying the camera deck (42 g).
    ///
    /// Arm length and torque-to-thrust ratio are typical values for this
    /// airframe rather than measured ones.
    pub fn crazyflie() -> Self {
        let kappa_f = 0.0288;
        Self {
            mass: 0.042,
            inertia: Matrix3::from_diagonal(&Vec3::new(1.657e-5, 1.666e-5, 2.926e-5)),
            kappa_f,
            actuation: x_configuration_actuation(kappa_f, 0.046, 0.006),
            ellipsoid: EllipsoidSpec::default(),
            geometry: RobotGeometry::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.mass > 0.0) {
            return Err(DynamicsError::InvalidParams(format!("mass {} must be positive", self.mass)));
        }
        if (self.inertia - self.inertia.transpose()).abs().max() > 1e-15 {
            return Err(DynamicsError::InvalidParams("inertia must be symmetric".into()));
        }
        if self.inertia.cholesky().is_none() {
            return Err(DynamicsError::InvalidParams("inertia must be positive definite".into()));
        }
        if self.actuation.row(0).iter().any(|&b| b != self.kappa_f) {
            return Err(DynamicsError::InvalidParams(
                "first actuation row must equal kappa_f everywhere".into(),
            ));
        }
        if self.actuation.try_inverse().is_none() {
            return Err(DynamicsError::SingularActuation);
        }
        Ok(())
    }
}

/// Actuation matrix of an X-configuration quadrotor.
///
/// Motors sit at `(±l/√2, ±l/√2)` and alternate spin direction; yaw torque
/// per motor is `±torque_ratio` times its thrust.
pub fn x_configuration_actuation(kappa_f: f64, arm_length: f64, torque_ratio: f64) -> Matrix4<f64> {
    let a = arm_length * FRAC_1_SQRT_2;
    let motors = [(a, -a, -1.0), (-a, -a, 1.0), (-a, a, -1.0), (a, a, 1.0)];
    let mut b = Matrix4::zeros();
    for (i, &(x, y, spin)) in motors.iter().enumerate() {
        b[(0, i)] = kappa_f;
        b[(1, i)] = kappa_f * y;
        b[(2, i)] = -kappa_f * x;
        b[(3, i)] = kappa_f * spin * torque_ratio;
    }
    b
}

/// Collective thrust and body torques.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub thrust: f64,
    pub torque: Vec3,
}

impl Wrench {
    pub fn new(thrust: f64, torque: Vec3) -> Self {
        Self { thrust, torque }
    }

    fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.thrust, self.torque.x, self.torque.y, self.torque.z)
    }
}

/// Squared motor speeds, (krad/s)².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorCommand(pub [f64; 4]);

impl MotorCommand {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Motor command that produces `eta`.
pub fn mix_wrench(eta: &Wrench, params: &QuadrotorParams) -> Result<MotorCommand, DynamicsError> {
    let inv = params.actuation.try_inverse().ok_or(DynamicsError::SingularActuation)?;
    let u = inv * eta.as_vector();
    let u = [u[0], u[1], u[2], u[3]];
    if u.iter().any(|&x| x < 0.0) {
        return Err(DynamicsError::InfeasibleWrench(u));
    }
    Ok(MotorCommand(u))
}

pub fn wrench_from_command(u: &MotorCommand, params: &QuadrotorParams) -> Wrench {
    let eta = params.actuation * Vector4::from(u.0);
    Wrench::new(eta[0], Vec3::new(eta[1], eta[2], eta[3]))
}

/// Full rigid-body state; angular velocity is expressed in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidBodyState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub orientation: Rotation,
    pub angular_velocity: Vec3,
}

impl RigidBodyState {
    pub fn at_rest(position: Vec3) -> Self {
        Self {
            position,
            velocity: Vec3::zeros(),
            orientation: Rotation::identity(),
            angular_velocity: Vec3::zeros(),
        }
    }

    pub fn kinetic_energy(&self, params: &QuadrotorParams) -> f64 {
        let w = self.angular_velocity;
        0.5 * params.mass * self.velocity.norm_squared() + 0.5 * w.dot(&(params.inertia * w))
    }
}

#[derive(Clone, Copy)]
struct Derivative {
    dp: Vec3,
    dv: Vec3,
    dq: Vector4<f64>,
    dw: Vec3,
}

fn derivative(
    v: &Vec3,
    q: &Vector4<f64>,
    w: &Vec3,
    wrench: &Wrench,
    f_a: &Vec3,
    params: &QuadrotorParams,
    inertia_inv: &Matrix3<f64>,
) -> Derivative {
    let quat = Quaternion::from_vector(*q);
    let rot = UnitQuaternion::new_normalize(quat);
    let thrust = rot * Vec3::new(0.0, 0.0, wrench.thrust);
    let dv = Vec3::new(0.0, 0.0, -GRAVITY) + (thrust + f_a) / params.mass;
    let dq = (quat * Quaternion::from_parts(0.0, *w)).coords * 0.5;
    let jw = params.inertia * w;
    let dw = inertia_inv * (jw.cross(w) + wrench.torque);
    Derivative { dp: *v, dv, dq, dw }
}

/// One classic Runge-Kutta step of the Newton-Euler model. The motor
/// command and residual force are held constant over the step and the
/// orientation is re-normalized afterwards.
pub fn step_dynamics(
    state: &RigidBodyState,
    u: &MotorCommand,
    f_a: &Vec3,
    dt: f64,
    params: &QuadrotorParams,
) -> Result<RigidBodyState, DynamicsError> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    let inertia_inv = params
        .inertia
        .try_inverse()
        .ok_or_else(|| DynamicsError::InvalidParams("inertia is singular".into()))?;
    let wrench = wrench_from_command(u, params);
    let p0 = state.position;
    let v0 = state.velocity;
    let q0 = state.orientation.quaternion().coords;
    let w0 = state.angular_velocity;
    let f = |v: &Vec3, q: &Vector4<f64>, w: &Vec3| derivative(v, q, w, &wrench, f_a, params, &inertia_inv);

    let k1 = f(&v0, &q0, &w0);
    let h = 0.5 * dt;
    let k2 = f(&(v0 + k1.dv * h), &(q0 + k1.dq * h), &(w0 + k1.dw * h));
    let k3 = f(&(v0 + k2.dv * h), &(q0 + k2.dq * h), &(w0 + k2.dw * h));
    let k4 = f(&(v0 + k3.dv * dt), &(q0 + k3.dq * dt), &(w0 + k3.dw * dt));

    let c = dt / 6.0;
    let position = p0 + (k1.dp + k2.dp * 2.0 + k3.dp * 2.0 + k4.dp) * c;
    let velocity = v0 + (k1.dv + k2.dv * 2.0 + k3.dv * 2.0 + k4.dv) * c;
    let q = q0 + (k1.dq + k2.dq * 2.0 + k3.dq * 2.0 + k4.dq) * c;
    let angular_velocity = w0 + (k1.dw + k2.dw * 2.0 + k3.dw * 2.0 + k4.dw) * c;
    Ok(RigidBodyState {
        position,
        velocity,
        orientation: UnitQuaternion::new_normalize(Quaternion::from_vector(q)),
        angular_velocity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// All robots fly between random waypoints while spinning.
    RandomWaypoint,
    /// Robots hover at fixed poses; the camera robot circles them.
    HoverOrbit,
    /// Two robots at different heights exchange their x-y positions.
    Swap,
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random_waypoint" => Ok(ScenarioKind::RandomWaypoint),
            "hover_orbit" => Ok(ScenarioKind::HoverOrbit),
            "swap" => Ok(ScenarioKind::Swap),
            _ => Err(format!("unknown scenario kind '{s}'")),
        }
    }
}

/// Flight scenario description. Robot 0 always carries the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub num_robots: usize,
    /// Auto-yaw rate of the camera robot [rad/s].
    #[serde(default = "defaults::yaw_rate")]
    pub yaw_rate: f64,
    #[serde(default = "defaults::pitch")]
    pub camera_pitch: PitchLabel,
    /// Camera frame rate [Hz].
    #[serde(default = "defaults::frame_rate")]
    pub frame_rate: f64,
    /// Scenario length [s].
    pub duration: f64,
    /// Pose sampling rate of the generated tracks [Hz].
    #[serde(default = "defaults::sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "defaults::arena_min")]
    pub arena_min: [f64; 3],
    #[serde(default = "defaults::arena_max")]
    pub arena_max: [f64; 3],
    #[serde(default)]
    pub seed: u64,

    /// Waypoint legs: peak speed [m/s].
    #[serde(default = "defaults::max_speed")]
    pub max_speed: f64,
    /// Waypoint legs: acceleration [m/s²].
    #[serde(default = "defaults::max_accel")]
    pub max_accel: f64,
    /// Smallest ellipsoid margin kept between waypoint robots; 0 disables avoidance.
    #[serde(default = "defaults::separation_margin")]
    pub separation_margin: f64,

    /// Heights of the hovering robots (one per robot besides the camera robot).
    #[serde(default = "defaults::hover_heights")]
    pub hover_heights: Vec<f64>,
    /// Radius of the circle the hovering robots are placed on.
    #[serde(default = "defaults::hover_spacing")]
    pub hover_spacing: f64,
    #[serde(default = "defaults::orbit_center")]
    pub orbit_center: [f64; 2],
    #[serde(default = "defaults::orbit_radius")]
    pub orbit_radius: f64,
    #[serde(default = "defaults::orbit_height")]
    pub orbit_height: f64,
    /// Tangential speed of the orbiting camera robot [m/s].
    #[serde(default = "defaults::orbit_speed")]
    pub orbit_speed: f64,

    /// Start positions of the two swapping robots.
    #[serde(default = "defaults::swap_start")]
    pub swap_start: [[f64; 3]; 2],

    #[serde(default = "defaults::fx")]
    pub fx: f64,
    #[serde(default = "defaults::fx")]
    pub fy: f64,
    #[serde(default = "defaults::cx")]
    pub cx: f64,
    #[serde(default = "defaults::cx")]
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default = "defaults::image_size")]
    pub image_width: u32,
    #[serde(default = "defaults::image_size")]
    pub image_height: u32,
    #[serde(default = "defaults::half_extents")]
    pub half_extents: [f64; 3],
    #[serde(default = "defaults::sphere_radius")]
    pub sphere_radius: f64,
    /// Ellipsoid radii used for separation and downwash.
    #[serde(default = "defaults::ellipsoid")]
    pub ellipsoid: [f64; 3],
}

mod defaults {
    use crate::geometry::{CameraIntrinsics, PitchLabel, RobotGeometry};

    pub fn yaw_rate() -> f64 {
        4.0
    }
    pub fn pitch() -> PitchLabel {
        PitchLabel::Forward
    }
    pub fn frame_rate() -> f64 {
        6.0
    }
    pub fn sample_rate() -> f64 {
        100.0
    }
    pub fn arena_min() -> [f64; 3] {
        [-1.5, -1.5, 0.3]
    }
    pub fn arena_max() -> [f64; 3] {
        [1.5, 1.5, 2.2]
    }
    pub fn max_speed() -> f64 {
        0.5
    }
    pub fn max_accel() -> f64 {
        1.0
    }
    pub fn separation_margin() -> f64 {
        2.0
    }
    pub fn hover_heights() -> Vec<f64> {
        vec![0.8, 1.2, 1.6]
    }
    pub fn hover_spacing() -> f64 {
        0.4
    }
    pub fn orbit_center() -> [f64; 2] {
        [0.0, 0.0]
    }
    pub fn orbit_radius() -> f64 {
        1.0
    }
    pub fn orbit_height() -> f64 {
        1.0
    }
    pub fn orbit_speed() -> f64 {
        0.4
    }
    pub fn swap_start() -> [[f64; 3]; 2] {
        [[-0.6, -0.6, 0.6], [0.6, 0.6, 1.0]]
    }
    pub fn fx() -> f64 {
        CameraIntrinsics::default().fx
    }
    pub fn cx() -> f64 {
        CameraIntrinsics::default().cx
    }
    pub fn image_size() -> u32 {
        CameraIntrinsics::default().width
    }
    pub fn half_extents() -> [f64; 3] {
        let h = RobotGeometry::default().half_extents;
        [h.x, h.y, h.z]
    }
    pub fn sphere_radius() -> f64 {
        RobotGeometry::default().sphere_radius
    }
    pub fn ellipsoid() -> [f64; 3] {
        [0.15, 0.15, 0.3]
    }
}

impl ScenarioConfig {
    /// Config with every optional field at its default.
    pub fn new(kind: ScenarioKind, num_robots: usize, duration: f64) -> Self {
        Self {
            kind,
            num_robots,
            yaw_rate: defaults::yaw_rate(),
            camera_pitch: defaults::pitch(),
            frame_rate: defaults::frame_rate(),
            duration,
            sample_rate: defaults::sample_rate(),
            arena_min: defaults::arena_min(),
            arena_max: defaults::arena_max(),
            seed: 0,
            max_speed: defaults::max_speed(),
            max_accel: defaults::max_accel(),
            separation_margin: defaults::separation_margin(),
            hover_heights: defaults::hover_heights(),
            hover_spacing: defaults::hover_spacing(),
            orbit_center: defaults::orbit_center(),
            orbit_radius: defaults::orbit_radius(),
            orbit_height: defaults::orbit_height(),
            orbit_speed: defaults::orbit_speed(),
            swap_start: defaults::swap_start(),
            fx: defaults::fx(),
            fy: defaults::fx(),
            cx: defaults::cx(),
            cy: defaults::cx(),
            k1: 0.0,
            image_width: defaults::image_size(),
            image_height: defaults::image_size(),
            half_extents: defaults::half_extents(),
            sphere_radius: defaults::sphere_radius(),
            ellipsoid: defaults::ellipsoid(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, DynamicsError> {
        let cfg: Self = toml::from_str(text).map_err(|e| DynamicsError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config is always representable")
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            k1: self.k1,
            width: self.image_width,
            height: self.image_height,
        }
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel::mounted(self.intrinsics(), self.camera_pitch)
    }

    pub fn geometry(&self) -> RobotGeometry {
        RobotGeometry {
            half_extents: Vec3::from(self.half_extents),
            sphere_radius: self.sphere_radius,
        }
    }

    pub fn ellipsoid_spec(&self) -> EllipsoidSpec {
        let [rx, ry, rz] = self.ellipsoid;
        EllipsoidSpec::new(rx, ry, rz)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |msg: String| Err(DynamicsError::InvalidConfig(msg));
        if !(1..=4).contains(&self.num_robots) {
            return bad(format!("num_robots must be between 1 and 4, got {}", self.num_robots));
        }
        let positive = [
            ("duration", self.duration),
            ("frame_rate", self.frame_rate),
            ("sample_rate", self.sample_rate),
            ("yaw_rate", self.yaw_rate),
            ("max_speed", self.max_speed),
            ("max_accel", self.max_accel),
            ("orbit_radius", self.orbit_radius),
            ("orbit_speed", self.orbit_speed),
            ("sphere_radius", self.sphere_radius),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {value}"));
            }
        }
        if self.sample_rate < 100.0 {
            return bad(format!("sample_rate must be at least 100 Hz, got {}", self.sample_rate));
        }
        if !(self.separation_margin >= 0.0) {
            return bad("separation_margin must be non-negative".into());
        }
        if (0..3).any(|i| !(self.arena_min[i] < self.arena_max[i])) {
            return bad("arena_min must be strictly below arena_max on every axis".into());
        }
        if self.half_extents.iter().chain(self.ellipsoid.iter()).any(|&r| !(r > 0.0)) {
            return bad("half_extents and ellipsoid radii must be positive".into());
        }
        if let Err(e) = self.intrinsics().validate() {
            return bad(e.to_string());
        }
        match self.kind {
            ScenarioKind::Swap => {
                if self.num_robots != 2 {
                    return bad(format!("swap requires exactly 2 robots, got {}", self.num_robots));
                }
                if self.swap_start[0][2] == self.swap_start[1][2] {
                    return bad("swap robots must start at different heights".into());
                }
            }
            ScenarioKind::HoverOrbit => {
                let needed = self.num_robots - 1;
                if self.hover_heights.len() < needed {
                    return bad(format!(
                        "hover_orbit with {} robots needs {needed} hover heights",
                        self.num_robots
                    ));
                }
                let heights = &self.hover_heights[..needed];
                for (i, a) in heights.iter().enumerate() {
                    if heights[i + 1..].contains(a) {
                        return bad("hover heights must be distinct".into());
                    }
                }
            }
            ScenarioKind::RandomWaypoint => {}
        }
        Ok(())
    }
}

/// Camera frame timestamps `0, 1/fps, 2/fps, …` up to the duration.
pub fn frame_schedule(cfg: &ScenarioConfig) -> Vec<f64> {
    if !(cfg.frame_rate > 0.0) || !(cfg.duration >= 0.0) {
        return Vec::new();
    }
    let n = (cfg.duration * cfg.frame_rate + 1e-9).floor() as u64;
    (0..=n)
        .map(|k| (k as f64 / cfg.frame_rate).min(cfg.duration))
        .collect()
}

/// Track sample times: uniform, at least `sample_rate`, ending exactly at the duration.
fn sample_times(cfg: &ScenarioConfig) -> Vec<f64> {
    let n = (cfg.duration * cfg.sample_rate - 1e-9).ceil().max(1.0) as usize;
    (0..=n).map(|k| cfg.duration * k as f64 / n as f64).collect()
}

fn yaw_rotation(angle: f64) -> Rotation {
    UnitQuaternion::from_axis_angle(&Vec3::z_axis(), angle.rem_euclid(TAU))
}

fn build_track(id: usize, times: &[f64], positions: &[Vec3], yaw: impl Fn(f64) -> f64) -> PoseTrack {
    let samples = times
        .iter()
        .zip(positions)
        .map(|(&t, p)| Pose::new(t, *p, yaw_rotation(yaw(t))))
        .collect();
    PoseTrack::new(robot_id(id), samples).expect("sample times are strictly increasing")
}

/// Identifier of the `index`-th generated robot.
pub fn robot_id(index: usize) -> String {
    format!("cf{index}")
}

/// Generates pose tracks for the scenario. Track 0 is the camera robot.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Vec<PoseTrack>, DynamicsError> {
    cfg.validate()?;
    let times = sample_times(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.kind {
        ScenarioKind::RandomWaypoint => random_waypoint(cfg, &times, &mut rng),
        ScenarioKind::HoverOrbit => Ok(hover_orbit(cfg, &times, &mut rng)),
        ScenarioKind::Swap => Ok(swap(cfg, &times, &mut rng)),
    }
}

/// Fraction of the leg covered after `t` seconds with a trapezoidal speed profile.
#[derive(Debug, Clone, Copy)]
struct TrapezoidLeg {
    start_time: f64,
    duration: f64,
    from: Vec3,
    to: Vec3,
    v_peak: f64,
    accel: f64,
}

impl TrapezoidLeg {
    fn new(start_time: f64, from: Vec3, to: Vec3, max_speed: f64, accel: f64) -> Self {
        let dist = (to - from).norm();
        let (v_peak, duration) = if dist >= max_speed * max_speed / accel {
            (max_speed, dist / max_speed + max_speed / accel)
        } else {
            let v = (dist * accel).sqrt();
            (v, 2.0 * v / accel)
        };
        Self {
            start_time,
            duration,
            from,
            to,
            v_peak,
            accel,
        }
    }

    fn hold(start_time: f64, at: Vec3, duration: f64) -> Self {
        Self {
            start_time,
            duration,
            from: at,
            to: at,
            v_peak: 0.0,
            accel: 1.0,
        }
    }

    fn end_time(&self) -> f64 {
        self.start_time + self.duration
    }

    fn position(&self, t: f64) -> Vec3 {
        let dist = (self.to - self.from).norm();
        if dist == 0.0 {
            return self.from;
        }
        let tau = (t - self.start_time).clamp(0.0, self.duration);
        let t_acc = self.v_peak / self.accel;
        let covered = if tau < t_acc {
            0.5 * self.accel * tau * tau
        } else if tau <= self.duration - t_acc {
            0.5 * self.accel * t_acc * t_acc + self.v_peak * (tau - t_acc)
        } else {
            let rem = self.duration - tau;
            dist - 0.5 * self.accel * rem * rem
        };
        self.from + (self.to - self.from) * (covered / dist).clamp(0.0, 1.0)
    }
}

const MIN_LEG_LENGTH: f64 = 0.2;
const WAYPOINT_ATTEMPTS: usize = 200;
const PLAN_ATTEMPTS: usize = 50;
const HOLD_DURATION: f64 = 0.5;

fn sample_in_arena(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::from_fn(|i, _| rng.random_range(cfg.arena_min[i]..cfg.arena_max[i]))
}

fn random_waypoint(
    cfg: &ScenarioConfig,
    times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PoseTrack>, DynamicsError> {
    let ellipsoid = cfg.ellipsoid_spec();
    for _ in 0..PLAN_ATTEMPTS {
        if let Some(paths) = plan_waypoints(cfg, times, &ellipsoid, rng) {
            let phases: Vec<f64> = (0..cfg.num_robots).map(|_| rng.random_range(0.0..TAU)).collect();
            return Ok(paths
                .iter()
                .enumerate()
                .map(|(i, p)| build_track(i, times, p, |t| phases[i] + cfg.yaw_rate * t))
                .collect());
        }
    }
    Err(DynamicsError::InvalidConfig(
        "could not find collision-free waypoint paths; enlarge the arena or lower separation_margin".into(),
    ))
}

/// Plans every robot in turn against the sampled paths of the robots
/// already planned. Returns `None` when a robot gets stuck.
fn plan_waypoints(
    cfg: &ScenarioConfig,
    times: &[f64],
    ellipsoid: &EllipsoidSpec,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Vec<Vec3>>> {
    let mut paths: Vec<Vec<Vec3>> = Vec::with_capacity(cfg.num_robots);
    let end = *times.last()?;
    for _ in 0..cfg.num_robots {
        let clear = |leg: &TrapezoidLeg, others: &[Vec<Vec3>]| {
            let first = times.partition_point(|&t| t < leg.start_time);
            let last = times.partition_point(|&t| t <= leg.end_time());
            (first..last).all(|k| {
                let p = leg.position(times[k]);
                others
                    .iter()
                    .all(|o| ellipsoid_margin(&p, &o[k], ellipsoid) >= cfg.separation_margin)
            })
        };
        let mut legs: Vec<TrapezoidLeg> = Vec::new();
        let mut pos = None;
        for _ in 0..WAYPOINT_ATTEMPTS {
            let p = sample_in_arena(cfg, rng);
            if clear(&TrapezoidLeg::hold(0.0, p, 0.0), &paths) {
                pos = Some(p);
                break;
            }
        }
        let mut pos = pos?;
        let mut t = 0.0;
        while t < end {
            let mut accepted = None;
            for _ in 0..WAYPOINT_ATTEMPTS {
                let w = sample_in_arena(cfg, rng);
                if (w - pos).norm() < MIN_LEG_LENGTH {
                    continue;
                }
                let leg = TrapezoidLeg::new(t, pos, w, cfg.max_speed, cfg.max_accel);
                if clear(&leg, &paths) {
                    accepted = Some(leg);
                    break;
                }
            }
            let leg = match accepted {
                Some(leg) => leg,
                None => {
                    let hold = TrapezoidLeg::hold(t, pos, HOLD_DURATION);
                    if !clear(&hold, &paths) {
                        return None;
                    }
                    hold
                }
            };
            t = leg.end_time();
            pos = leg.to;
            legs.push(leg);
        }
        let path = times
            .iter()
            .map(|&ts| {
                let i = legs.partition_point(|l| l.end_time() < ts).min(legs.len() - 1);
                legs[i].position(ts)
            })
            .collect();
        paths.push(path);
    }
    Some(paths)
}

fn hover_orbit(cfg: &ScenarioConfig, times: &[f64], rng: &mut ChaCha8Rng) -> Vec<PoseTrack> {
    let [ox, oy] = cfg.orbit_center;
    let omega = cfg.orbit_speed / cfg.orbit_radius;
    let phase0 = rng.random_range(0.0..TAU);
    let yaw0 = rng.random_range(0.0..TAU);
    let orbit: Vec<Vec3> = times
        .iter()
        .map(|&t| {
            let a = phase0 + omega * t;
            Vec3::new(ox + cfg.orbit_radius * a.cos(), oy + cfg.orbit_radius * a.sin(), cfg.orbit_height)
        })
        .collect();
    let mut tracks = vec![build_track(0, times, &orbit, |t| yaw0 + cfg.yaw_rate * t)];
    let hovering = cfg.num_robots - 1;
    for k in 0..hovering {
        let a = TAU * k as f64 / hovering as f64;
        let p = Vec3::new(
            ox + cfg.hover_spacing * a.cos(),
            oy + cfg.hover_spacing * a.sin(),
            cfg.hover_heights[k],
        );
        let heading = rng.random_range(0.0..TAU);
        tracks.push(build_track(k + 1, times, &vec![p; times.len()], |_| heading));
    }
    tracks
}

/// Minimum-jerk blend from 0 to 1.
fn smoothstep5(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

fn swap(cfg: &ScenarioConfig, times: &[f64], rng: &mut ChaCha8Rng) -> Vec<PoseTrack> {
    let (a, b) = (Vec3::from(cfg.swap_start[0]), Vec3::from(cfg.swap_start[1]));
    let (lower, upper) = if a.z < b.z { (a, b) } else { (b, a) };
    let path = |from: Vec3, to: Vec3| -> Vec<Vec3> {
        times
            .iter()
            .map(|&t| {
                let s = smoothstep5(t / cfg.duration);
                Vec3::new(from.x + s * (to.x - from.x), from.y + s * (to.y - from.y), from.z)
            })
            .collect()
    };
    let yaw0 = rng.random_range(0.0..TAU);
    let heading = rng.random_range(0.0..TAU);
    vec![
        build_track(0, times, &path(lower, upper), |t| yaw0 + cfg.yaw_rate * t),
        build_track(1, times, &path(upper, lower), |_| heading),
    ]
}
