//! Rigid transforms, camera projection and frame annotation.
//!
//! Frame conventions:
//!
//! - world `W` and robot `R` frames are z-up; the robot's x axis points forward
//! - camera frame `C` has z along the optical axis, x to the image right and y
//!   to the image bottom
//! - a [`RigidTransform`] named `a_to_b` maps point coordinates from frame `a`
//!   into frame `b`
//!
//! The relative transform of a neighbor robot `i` into the camera of robot `j`
//! is the chain
//!
//! ```text
//! T(R_i -> C_j) = T(R_j -> C_j) · T(R_j -> W)⁻¹ · T(R_i -> W)
//! ```
//!
//! Projection uses a pinhole model with a single radial distortion term
//! applied to normalized coordinates:
//!
//! ```text
//! (x', y') = (x/z, y/z)
//! s        = 1 + k1·(x'² + y'²)
//! (u, v)   = (fx·s·x' + cx, fy·s·y' + cy)
//! ```

use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Isometry3, Matrix3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3D vector in meters (or unitless for directions).
pub type Vec3 = Vector3<f64>;

/// Unit quaternion rotation.
pub type Rotation = UnitQuaternion<f64>;

/// Proper rigid transform (rotation followed by translation).
pub type RigidTransform = Isometry3<f64>;

/// Maximum number of undistortion iterations.
pub const UNDISTORT_MAX_ITERATIONS: usize = 10;

/// Step size at which undistortion stops iterating.
pub const UNDISTORT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth (z = {0})")]
    NonPositiveDepth(f64),
    #[error("time {t} s is outside the track span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("pose track needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("pose track timestamps must be finite, non-negative and strictly increasing (sample {0})")]
    BadTimestamps(usize),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rotation search grid: {0}")]
    InvalidGrid(String),
    #[error("no usable correspondences for extrinsic refinement")]
    NoObservations,
}

/// Timestamped pose of a robot: its robot-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub timestamp: f64,
    #[serde(with = "transform_serde")]
    pub transform: RigidTransform,
}

impl Pose {
    pub fn new(timestamp: f64, position: Vec3, rotation: Rotation) -> Self {
        Self {
            timestamp,
            transform: Isometry3::from_parts(Translation3::from(position), rotation),
        }
    }

    pub fn position(&self) -> Vec3 {
        self.transform.translation.vector
    }

    pub fn rotation(&self) -> Rotation {
        self.transform.rotation
    }
}

/// Pose of a named robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub robot_id: String,
    pub pose: Pose,
}

/// Time-ordered poses of one robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTrack {
    robot_id: String,
    samples: Vec<Pose>,
}

impl PoseTrack {
    /// Builds a track, checking that timestamps are finite, non-negative and
    /// strictly increasing.
    pub fn new(robot_id: impl Into<String>, samples: Vec<Pose>) -> Result<Self, GeometryError> {
        for (i, s) in samples.iter().enumerate() {
            if !s.timestamp.is_finite() || s.timestamp < 0.0 {
                return Err(GeometryError::BadTimestamps(i));
            }
            if i > 0 && s.timestamp <= samples[i - 1].timestamp {
                return Err(GeometryError::BadTimestamps(i));
            }
        }
        Ok(Self {
            robot_id: robot_id.into(),
            samples,
        })
    }

    pub fn robot_id(&self) -> &str {
        &self.robot_id
    }

    pub fn samples(&self) -> &[Pose] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First and last timestamp, if any.
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.timestamp, self.samples.last()?.timestamp))
    }

    pub fn interpolate(&self, t: f64) -> Result<Pose, GeometryError> {
        interpolate_pose(self, t)
    }
}

/// Pinhole intrinsics with one radial distortion coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// 320×320 image with roughly 83° horizontal field of view, no distortion.
    fn default() -> Self {
        Self {
            fx: 180.0,
            fy: 180.0,
            cx: 160.0,
            cy: 160.0,
            k1: 0.0,
            width: 320,
            height: 320,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy));
        }
        if !(self.cx >= 0.0 && self.cx < f64::from(self.width)) {
            return bad(format!("cx = {} not in [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < f64::from(self.height)) {
            return bad(format!("cy = {} not in [0, {})", self.cy, self.height));
        }
        if !self.k1.is_finite() {
            return bad("k1 must be finite".into());
        }
        Ok(())
    }

    /// Applies radial distortion to normalized coordinates.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let s = 1.0 + self.k1 * (x * x + y * y);
        (x * s, y * s)
    }

    /// Inverts [`Self::distort`].
    ///
    /// The radial model reduces to the scalar equation `r + k1·r³ = r_d`,
    /// which is solved with Newton's method starting from `r = r_d`.
    pub fn undistort(&self, xd: f64, yd: f64) -> (f64, f64) {
        let rd = (xd * xd + yd * yd).sqrt();
        if self.k1 == 0.0 || rd == 0.0 {
            return (xd, yd);
        }
        let mut r = rd;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let g = r + self.k1 * r * r * r - rd;
            let dg = 1.0 + 3.0 * self.k1 * r * r;
            if dg.abs() < f64::EPSILON {
                break;
            }
            let step = g / dg;
            r -= step;
            if step.abs() < UNDISTORT_TOLERANCE {
                break;
            }
        }
        let scale = r / rd;
        (xd * scale, yd * scale)
    }

    /// True if the pixel lies strictly inside the image rectangle.
    pub fn contains(&self, p: &ImagePoint) -> bool {
        p.u > 0.0 && p.u < f64::from(self.width) && p.v > 0.0 && p.v < f64::from(self.height)
    }
}

/// Fixed camera pitch relative to the robot's horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PitchLabel {
    Forward,
    Tilt45,
    Up,
}

impl PitchLabel {
    pub const ALL: [PitchLabel; 3] = [PitchLabel::Forward, PitchLabel::Tilt45, PitchLabel::Up];

    /// Elevation of the optical axis above the robot's x-y plane [rad].
    pub fn elevation(self) -> f64 {
        match self {
            PitchLabel::Forward => 0.0,
            PitchLabel::Tilt45 => FRAC_PI_4,
            PitchLabel::Up => 2.0 * FRAC_PI_4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PitchLabel::Forward => "forward",
            PitchLabel::Tilt45 => "tilt45",
            PitchLabel::Up => "up",
        }
    }
}

impl fmt::Display for PitchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PitchLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forward" => Ok(PitchLabel::Forward),
            "tilt45" | "45" => Ok(PitchLabel::Tilt45),
            "up" => Ok(PitchLabel::Up),
            other => Err(format!("unknown camera pitch '{other}' (expected forward, tilt45 or up)")),
        }
    }
}

/// Intrinsics plus the robot-to-camera extrinsic transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    #[serde(with = "transform_serde")]
    pub extrinsic: RigidTransform,
    pub pitch: PitchLabel,
}

impl CameraModel {
    /// Camera at the robot origin whose optical axis points along the robot's
    /// x axis, pitched up by the label's elevation. Image right is the
    /// robot's −y axis.
    pub fn mounted(intrinsics: CameraIntrinsics, pitch: PitchLabel) -> Self {
        let (s, c) = pitch.elevation().sin_cos();
        // Columns: camera axes expressed in the robot frame.
        let x_axis = Vec3::new(0.0, -1.0, 0.0);
        let y_axis = Vec3::new(s, 0.0, -c);
        let z_axis = Vec3::new(c, 0.0, s);
        let camera_to_robot = Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
        let rot = UnitQuaternion::from_matrix(&camera_to_robot);
        Self {
            intrinsics,
            extrinsic: Isometry3::from_parts(Translation3::identity(), rot.inverse()),
            pitch,
        }
    }

    /// World-to-camera transform for the given ego pose.
    pub fn world_to_camera(&self, ego: &Pose) -> RigidTransform {
        self.extrinsic * ego.transform.inverse()
    }

    /// Camera-to-world transform for the given ego pose.
    pub fn camera_to_world(&self, ego: &Pose) -> RigidTransform {
        ego.transform * self.extrinsic.inverse()
    }

    /// Projects a world point into the image of the ego camera, returning the
    /// pixel only if depth is positive and the pixel is strictly inside the image.
    pub fn observe_world_point(&self, ego: &Pose, p_world: &Vec3) -> Option<ImagePoint> {
        let p_cam = self.world_to_camera(ego).transform_point(&(*p_world).into());
        project(&p_cam.coords, &self.intrinsics)
            .ok()
            .filter(|px| self.intrinsics.contains(px))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Axis-aligned image rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BoundingBox {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        Self { u_min, v_min, u_max, v_max }
    }

    /// Tight box around a set of points; `None` for an empty set.
    pub fn enclosing<I: IntoIterator<Item = ImagePoint>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let init = Self::new(first.u, first.v, first.u, first.v);
        Some(it.fold(init, |b, p| {
            Self::new(b.u_min.min(p.u), b.v_min.min(p.v), b.u_max.max(p.u), b.v_max.max(p.v))
        }))
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn center(&self) -> ImagePoint {
        ImagePoint::new(0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))
    }

    pub fn is_valid(&self) -> bool {
        self.u_min <= self.u_max && self.v_min <= self.v_max
    }

    pub fn contains(&self, p: &ImagePoint) -> bool {
        p.u >= self.u_min && p.u <= self.u_max && p.v >= self.v_min && p.v <= self.v_max
    }

    /// Clips to `[0, width] × [0, height]`.
    pub fn clip(&self, width: u32, height: u32) -> Self {
        let (w, h) = (f64::from(width), f64::from(height));
        Self::new(
            self.u_min.clamp(0.0, w),
            self.v_min.clamp(0.0, h),
            self.u_max.clamp(0.0, w),
            self.v_max.clamp(0.0, h),
        )
    }
}

/// Physical size of a robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotGeometry {
    /// Half side lengths of the body box in the robot frame.
    pub half_extents: Vec3,
    /// Radius of the sphere the box decoder assumes.
    pub sphere_radius: f64,
}

impl Default for RobotGeometry {
    /// Crazyflie-class nano quadrotor.
    fn default() -> Self {
        Self {
            half_extents: Vec3::new(0.05, 0.05, 0.02),
            sphere_radius: 0.05,
        }
    }
}

impl RobotGeometry {
    pub fn is_valid(&self) -> bool {
        self.half_extents.iter().all(|&h| h > 0.0) && self.sphere_radius > 0.0
    }

    /// The eight body-box corners in the robot frame.
    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.half_extents;
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *c = Vec3::new(sx * h.x, sy * h.y, sz * h.z);
        }
        out
    }
}

/// Ground truth for one visible neighbor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborAnnotation {
    pub robot_id: String,
    /// Position of the neighbor's origin in the ego camera frame.
    pub rel_position: Vec3,
    pub center: ImagePoint,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_id: u64,
    pub timestamp: f64,
    pub ego_id: String,
    pub neighbors: Vec<NeighborAnnotation>,
}

/// Transform from the neighbor's robot frame into the ego's camera frame.
pub fn relative_transform(ego_pose: &Pose, neighbor_pose: &Pose, camera: &CameraModel) -> RigidTransform {
    camera.extrinsic * ego_pose.transform.inverse() * neighbor_pose.transform
}

/// Projects a camera-frame point to pixels.
pub fn project(point_camera: &Vec3, intr: &CameraIntrinsics) -> Result<ImagePoint, GeometryError> {
    let z = point_camera.z;
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    let (xd, yd) = intr.distort(point_camera.x / z, point_camera.y / z);
    Ok(ImagePoint::new(intr.fx * xd + intr.cx, intr.fy * yd + intr.cy))
}

/// Lifts a pixel with known camera-frame depth back to a 3D camera-frame point.
pub fn back_project(pixel: &ImagePoint, depth_z: f64, intr: &CameraIntrinsics) -> Result<Vec3, GeometryError> {
    if !(depth_z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth_z));
    }
    let (x, y) = pixel_to_normalized(pixel, intr);
    Ok(Vec3::new(depth_z * x, depth_z * y, depth_z))
}

/// Undistorted normalized image coordinates of a pixel.
pub fn pixel_to_normalized(pixel: &ImagePoint, intr: &CameraIntrinsics) -> (f64, f64) {
    intr.undistort((pixel.u - intr.cx) / intr.fx, (pixel.v - intr.cy) / intr.fy)
}

/// Unit ray through a pixel in the camera frame.
pub fn pixel_ray(pixel: &ImagePoint, intr: &CameraIntrinsics) -> Vec3 {
    let (x, y) = pixel_to_normalized(pixel, intr);
    Vec3::new(x, y, 1.0).normalize()
}

/// Unclipped bounding box of the projected body corners for a robot whose
/// frame maps into the camera frame by `robot_to_camera`. A corner at
/// non-positive depth makes the box unbounded.
pub fn corner_bbox(robot_to_camera: &RigidTransform, intr: &CameraIntrinsics, geom: &RobotGeometry) -> BoundingBox {
    let mut pixels = Vec::with_capacity(8);
    for corner in geom.corners() {
        let p = robot_to_camera.transform_point(&corner.into());
        match project(&p.coords, intr) {
            Ok(px) => pixels.push(px),
            Err(_) => {
                return BoundingBox::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY);
            }
        }
    }
    BoundingBox::enclosing(pixels).expect("eight corners")
}

/// Ground-truth annotation of every neighbor whose center is visible.
///
/// A neighbor is visible when its origin has positive camera depth and
/// projects strictly inside the image. Its box is the min/max of the
/// eight projected body corners, clipped to the image.
pub fn annotate_frame(
    frame_id: u64,
    ego: &RobotPose,
    neighbors: &[RobotPose],
    camera: &CameraModel,
    geom: &RobotGeometry,
) -> FrameAnnotation {
    let intr = &camera.intrinsics;
    let visible = neighbors
        .iter()
        .filter_map(|n| {
            let rel = relative_transform(&ego.pose, &n.pose, camera);
            let rel_position = rel.translation.vector;
            let center = project(&rel_position, intr).ok().filter(|c| intr.contains(c))?;
            let bbox = corner_bbox(&rel, intr, geom).clip(intr.width, intr.height);
            Some(NeighborAnnotation {
                robot_id: n.robot_id.clone(),
                rel_position,
                center,
                bbox,
            })
        })
        .collect();
    FrameAnnotation {
        frame_id,
        timestamp: ego.pose.timestamp,
        ego_id: ego.robot_id.clone(),
        neighbors: visible,
    }
}

/// Shortest-arc spherical interpolation between two rotations.
pub fn slerp_shortest(a: &Rotation, b: &Rotation, s: f64) -> Rotation {
    let qa = a.quaternion().coords;
    let mut qb = b.quaternion().coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let blended = if dot > 1.0 - 1e-12 {
        qa * (1.0 - s) + qb * s
    } else {
        let theta = dot.min(1.0).acos();
        let sin_theta = theta.sin();
        qa * (((1.0 - s) * theta).sin() / sin_theta) + qb * ((s * theta).sin() / sin_theta)
    };
    UnitQuaternion::new_normalize(Quaternion::from_vector(blended))
}

/// Pose of a track at time `t`.
///
/// Position is interpolated linearly and orientation along the shortest
/// arc between the bracketing samples. Sample timestamps return the sample
/// unchanged. No extrapolation.
pub fn interpolate_pose(track: &PoseTrack, t: f64) -> Result<Pose, GeometryError> {
    let samples = track.samples();
    if samples.len() < 2 {
        return Err(GeometryError::TooFewSamples(samples.len()));
    }
    let (start, end) = (samples[0].timestamp, samples[samples.len() - 1].timestamp);
    if !(t >= start && t <= end) {
        return Err(GeometryError::OutOfRange { t, start, end });
    }
    let hi = samples.partition_point(|s| s.timestamp < t);
    if samples[hi].timestamp == t {
        return Ok(samples[hi]);
    }
    let (a, b) = (&samples[hi - 1], &samples[hi]);
    let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
    let position = a.position().lerp(&b.position(), s);
    let rotation = slerp_shortest(&a.rotation(), &b.rotation(), s);
    Ok(Pose::new(t, position, rotation))
}

/// One observed neighbor center paired with the ground truth that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicObservation {
    pub ego_pose: Pose,
    /// Ground-truth neighbor position in the world frame.
    pub neighbor_position: Vec3,
    pub observed_center: ImagePoint,
}

/// Cube of rotation-vector perturbations to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationGrid {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub step: [f64; 3],
}

impl Default for RotationGrid {
    fn default() -> Self {
        Self::cube(0.15, 0.01)
    }
}

impl RotationGrid {
    /// `[-half_width, half_width]` with the same step on every axis.
    pub fn cube(half_width: f64, step: f64) -> Self {
        Self {
            min: [-half_width; 3],
            max: [half_width; 3],
            step: [step; 3],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for axis in 0..3 {
            let (lo, hi, st) = (self.min[axis], self.max[axis], self.step[axis]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(GeometryError::InvalidGrid(format!("axis {axis}: range [{lo}, {hi}]")));
            }
            if !(st > 0.0 && st.is_finite()) {
                return Err(GeometryError::InvalidGrid(format!("axis {axis}: step {st}")));
            }
        }
        Ok(())
    }

    /// Grid values on one axis, `min + k·step` up to `max`.
    pub fn axis_values(&self, axis: usize) -> Vec<f64> {
        let (lo, hi, st) = (self.min[axis], self.max[axis], self.step[axis]);
        let n = ((hi - lo) / st + 1e-9).floor() as usize;
        (0..=n).map(|k| lo + k as f64 * st).collect()
    }

    /// All grid points in x-major order.
    pub fn points(&self) -> Vec<Vec3> {
        let (xs, ys, zs) = (self.axis_values(0), self.axis_values(1), self.axis_values(2));
        let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &x in &xs {
            for &y in &ys {
                for &z in &zs {
                    out.push(Vec3::new(x, y, z));
                }
            }
        }
        out
    }
}

/// Extrinsic whose rotation is `exp(delta)` applied after the camera's
/// current rotation. Translation is kept.
pub fn perturbed_extrinsic(extrinsic: &RigidTransform, delta: &Vec3) -> RigidTransform {
    let rotation = UnitQuaternion::from_scaled_axis(*delta) * extrinsic.rotation;
    Isometry3::from_parts(extrinsic.translation, rotation)
}

/// Mean squared reprojection error [px²] of the ground-truth neighbor
/// centers under `extrinsic`. Infinite if any center fails to project.
pub fn reprojection_objective(
    observations: &[ExtrinsicObservation],
    intr: &CameraIntrinsics,
    extrinsic: &RigidTransform,
) -> f64 {
    if observations.is_empty() {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for obs in observations {
        let world_to_camera = extrinsic * obs.ego_pose.transform.inverse();
        let p = world_to_camera.transform_point(&obs.neighbor_position.into());
        match project(&p.coords, intr) {
            Ok(px) => {
                let (du, dv) = (px.u - obs.observed_center.u, px.v - obs.observed_center.v);
                sum += du * du + dv * dv;
            }
            Err(_) => return f64::INFINITY,
        }
    }
    sum / observations.len() as f64
}

/// Exhaustive search over rotation-vector perturbations of the camera
/// extrinsic, returning the extrinsic with the lowest mean squared
/// reprojection error. Ties keep the earliest grid point.
pub fn refine_extrinsic_rotation(
    observations: &[ExtrinsicObservation],
    camera: &CameraModel,
    grid: &RotationGrid,
) -> Result<RigidTransform, GeometryError> {
    grid.validate()?;
    let usable: Vec<ExtrinsicObservation> = observations
        .iter()
        .filter(|o| {
            o.neighbor_position.iter().all(|c| c.is_finite())
                && o.observed_center.u.is_finite()
                && o.observed_center.v.is_finite()
        })
        .copied()
        .collect();
    if usable.is_empty() {
        return Err(GeometryError::NoObservations);
    }
    let mut best: Option<(f64, RigidTransform)> = None;
    for delta in grid.points() {
        let candidate = perturbed_extrinsic(&camera.extrinsic, &delta);
        let cost = reprojection_objective(&usable, &camera.intrinsics, &candidate);
        if cost.is_finite() && best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, candidate));
        }
    }
    best.map(|(_, t)| t).ok_or(GeometryError::NoObservations)
}

/// Serde representation of a rigid transform: translation `[x, y, z]` and
/// rotation quaternion `[w, x, y, z]`.
pub mod transform_serde {
    use super::*;
    use serde::{de::Error as _, Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        translation: [f64; 3],
        rotation: [f64; 4],
    }

    pub fn serialize<S: Serializer>(t: &RigidTransform, s: S) -> Result<S::Ok, S::Error> {
        let v = t.translation.vector;
        let q = t.rotation.quaternion();
        Repr {
            translation: [v.x, v.y, v.z],
            rotation: [q.w, q.i, q.j, q.k],
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RigidTransform, D::Error> {
        let r = Repr::deserialize(d)?;
        let [w, x, y, z] = r.rotation;
        let q = Quaternion::new(w, x, y, z);
        if !((q.norm() - 1.0).abs() < 1e-6) {
            return Err(D::Error::custom(format!("rotation quaternion norm {} is not 1", q.norm())));
        }
        let [tx, ty, tz] = r.translation;
        Ok(Isometry3::from_parts(
            Translation3::new(tx, ty, tz),
            UnitQuaternion::new_unchecked(q),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn yaw(angle: f64) -> Rotation {
        UnitQuaternion::from_axis_angle(&Vec3::z_axis(), angle)
    }

    fn rotations_close(a: &Rotation, b: &Rotation) -> bool {
        let (qa, qb) = (a.quaternion().coords, b.quaternion().coords);
        (qa - qb).norm().min((qa + qb).norm()) < 1e-12
    }

    fn homogeneous(t: &RigidTransform) -> Matrix4<f64> {
        let r = t.rotation.to_rotation_matrix().into_inner();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation.vector);
        m
    }

    fn intr_200() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 200.0,
            fy: 200.0,
            cx: 160.0,
            cy: 160.0,
            k1: 0.0,
            width: 320,
            height: 320,
        }
    }

    fn identity_camera(intr: CameraIntrinsics) -> CameraModel {
        CameraModel {
            intrinsics: intr,
            extrinsic: RigidTransform::identity(),
            pitch: PitchLabel::Forward,
        }
    }

    #[test]
    fn relative_transform_identity_chain() {
        let p = Pose::new(0.0, Vec3::zeros(), Rotation::identity());
        let cam = identity_camera(intr_200());
        let t = relative_transform(&p, &p, &cam);
        assert_relative_eq!(homogeneous(&t), Matrix4::identity(), epsilon = 1e-12);

        let n = Pose::new(0.0, Vec3::new(1.0, 0.0, 0.0), Rotation::identity());
        let t = relative_transform(&p, &n, &cam);
        assert_relative_eq!(t.translation.vector, Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn relative_transform_matches_matrix_chain() {
        let ego = Pose::new(0.0, Vec3::new(1.0, 2.0, 3.0), yaw(FRAC_PI_2));
        let nb = Pose::new(0.0, Vec3::new(2.0, 2.0, 3.0), Rotation::identity());
        let cam = identity_camera(intr_200());
        // Independent oracle: explicit 4×4 products with a hand-built inverse.
        let ego_h = homogeneous(&ego.transform);
        let r = ego_h.fixed_view::<3, 3>(0, 0).into_owned();
        let t = ego_h.fixed_view::<3, 1>(0, 3).into_owned();
        let mut ego_inv = Matrix4::identity();
        ego_inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r.transpose());
        ego_inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r.transpose() * t));
        let oracle = homogeneous(&cam.extrinsic) * ego_inv * homogeneous(&nb.transform);
        let got = homogeneous(&relative_transform(&ego, &nb, &cam));
        assert_relative_eq!(got, oracle, epsilon = 1e-12);
        // Neighbor is 1 m along world +x, which is the ego's −y after a 90° yaw.
        assert_relative_eq!(got[(0, 3)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(got[(1, 3)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(got[(2, 3)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn project_examples() {
        let intr = intr_200();
        let c = project(&Vec3::new(0.0, 0.0, 1.0), &intr).unwrap();
        assert_eq!((c.u, c.v), (160.0, 160.0));
        let p = project(&Vec3::new(1.0, 0.0, 2.0), &intr).unwrap();
        assert_relative_eq!(p.u, 260.0, epsilon = 1e-12);
        assert!(matches!(
            project(&Vec3::new(1.0, 0.0, 0.0), &intr),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(project(&Vec3::new(0.0, 0.0, -1.0), &intr).is_err());
    }

    #[test]
    fn back_project_examples() {
        let intr = intr_200();
        let p = back_project(&ImagePoint::new(160.0, 160.0), 2.0, &intr).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 2.0));
        let p = back_project(&ImagePoint::new(260.0, 160.0), 2.0, &intr).unwrap();
        assert_relative_eq!(p, Vec3::new(1.0, 0.0, 2.0), epsilon = 1e-12);
        assert!(back_project(&ImagePoint::new(0.0, 0.0), 0.0, &intr).is_err());
    }

    #[test]
    fn undistort_inverts_distort() {
        let intr = CameraIntrinsics { k1: 0.1, ..intr_200() };
        for &(x, y) in &[(0.3, -0.2), (0.8, 0.8), (-1.0, 0.1), (0.0, 0.0)] {
            let (xd, yd) = intr.distort(x, y);
            let (xu, yu) = intr.undistort(xd, yd);
            assert_relative_eq!(xu, x, epsilon = 1e-13);
            assert_relative_eq!(yu, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::default().validate().is_ok());
        assert!(CameraIntrinsics { fx: 0.0, ..Default::default() }.validate().is_err());
        assert!(CameraIntrinsics { cx: 320.0, ..Default::default() }.validate().is_err());
        assert!(CameraIntrinsics { cy: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn mounted_cameras_look_where_expected() {
        let intr = CameraIntrinsics::default();
        let ego = Pose::new(0.0, Vec3::zeros(), Rotation::identity());
        let fwd = CameraModel::mounted(intr, PitchLabel::Forward);
        let up = CameraModel::mounted(intr, PitchLabel::Up);
        let tilt = CameraModel::mounted(intr, PitchLabel::Tilt45);
        let ahead = Vec3::new(2.0, 0.0, 0.0);
        let above = Vec3::new(0.0, 0.0, 2.0);
        let c = fwd.observe_world_point(&ego, &ahead).unwrap();
        assert_relative_eq!(c.u, 160.0, epsilon = 1e-9);
        assert!(fwd.observe_world_point(&ego, &above).is_none());
        assert!(up.observe_world_point(&ego, &above).is_some());
        assert!(up.observe_world_point(&ego, &ahead).is_none());
        let diag = Vec3::new(1.0, 0.0, 1.0);
        let c = tilt.observe_world_point(&ego, &diag).unwrap();
        assert_relative_eq!(c.v, 160.0, epsilon = 1e-9);
        // Robot +y (left) shows up on the image left, robot +z at the image top.
        let left = fwd.observe_world_point(&ego, &Vec3::new(2.0, 0.5, 0.3)).unwrap();
        assert!(left.u < 160.0 && left.v < 160.0);
    }

    #[test]
    fn annotate_cube_box_half_width() {
        let cam = identity_camera(intr_200());
        let geom = RobotGeometry {
            half_extents: Vec3::new(0.05, 0.05, 0.05),
            sphere_radius: 0.05,
        };
        let ego = RobotPose {
            robot_id: "ego".into(),
            pose: Pose::new(1.0, Vec3::zeros(), Rotation::identity()),
        };
        let nb = RobotPose {
            robot_id: "n1".into(),
            pose: Pose::new(1.0, Vec3::new(0.0, 0.0, 1.0), Rotation::identity()),
        };
        let ann = annotate_frame(3, &ego, &[nb], &cam, &geom);
        assert_eq!(ann.frame_id, 3);
        assert_eq!(ann.neighbors.len(), 1);
        let b = ann.neighbors[0].bbox;
        let half = 200.0 * 0.05 / 0.95;
        assert_relative_eq!(b.u_max - 160.0, half, epsilon = 1e-9);
        assert_relative_eq!(160.0 - b.u_min, half, epsilon = 1e-9);
        assert_relative_eq!(b.v_max - 160.0, half, epsilon = 1e-9);
        assert!((half - 10.526).abs() < 1e-3);
    }

    #[test]
    fn annotate_filters_invisible_neighbors() {
        let cam = identity_camera(intr_200());
        let geom = RobotGeometry::default();
        let ego = RobotPose {
            robot_id: "ego".into(),
            pose: Pose::new(0.0, Vec3::zeros(), Rotation::identity()),
        };
        assert!(annotate_frame(0, &ego, &[], &cam, &geom).neighbors.is_empty());
        let behind = RobotPose {
            robot_id: "b".into(),
            pose: Pose::new(0.0, Vec3::new(0.0, 0.0, -1.0), Rotation::identity()),
        };
        let off_image = RobotPose {
            robot_id: "o".into(),
            pose: Pose::new(0.0, Vec3::new(5.0, 0.0, 1.0), Rotation::identity()),
        };
        let ann = annotate_frame(0, &ego, &[behind, off_image], &cam, &geom);
        assert!(ann.neighbors.is_empty());
    }

    #[test]
    fn annotate_clips_partially_visible_box() {
        let cam = identity_camera(intr_200());
        let geom = RobotGeometry::default();
        let ego = RobotPose {
            robot_id: "ego".into(),
            pose: Pose::new(0.0, Vec3::zeros(), Rotation::identity()),
        };
        // Center at u = 160 + 200·0.79 = 318, corners reach past 320.
        let nb = RobotPose {
            robot_id: "n".into(),
            pose: Pose::new(0.0, Vec3::new(0.79, 0.0, 1.0), Rotation::identity()),
        };
        let ann = annotate_frame(0, &ego, &[nb], &cam, &geom);
        assert_eq!(ann.neighbors.len(), 1);
        assert_eq!(ann.neighbors[0].bbox.u_max, 320.0);
    }

    #[test]
    fn interpolation_examples() {
        let track = PoseTrack::new(
            "r",
            vec![
                Pose::new(0.0, Vec3::zeros(), Rotation::identity()),
                Pose::new(1.0, Vec3::new(2.0, 0.0, 0.0), yaw(FRAC_PI_2)),
                Pose::new(2.0, Vec3::new(2.0, 2.0, 0.0), yaw(PI)),
            ],
        )
        .unwrap();
        assert_eq!(interpolate_pose(&track, 1.0).unwrap(), track.samples()[1]);
        assert_eq!(interpolate_pose(&track, 0.0).unwrap(), track.samples()[0]);
        let p = interpolate_pose(&track, 0.25).unwrap();
        assert_relative_eq!(p.position(), Vec3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
        // Closed-form oracle: half of a 90° rotation about z.
        let mid = interpolate_pose(&track, 0.5).unwrap().rotation();
        let q = mid.quaternion();
        let h = FRAC_PI_4 / 2.0;
        assert_relative_eq!(q.w, h.cos(), epsilon = 1e-12);
        assert_relative_eq!(q.k, h.sin(), epsilon = 1e-12);
        assert_relative_eq!(q.i, 0.0, epsilon = 1e-12);
        assert!(matches!(
            interpolate_pose(&track, 2.5),
            Err(GeometryError::OutOfRange { .. })
        ));
        assert!(interpolate_pose(&track, -0.1).is_err());
    }

    #[test]
    fn slerp_takes_shortest_arc() {
        let a = yaw(0.1);
        // Same rotation as yaw(-0.1) but with the quaternion sign flipped.
        let b = UnitQuaternion::new_unchecked(-yaw(-0.1).into_inner());
        let mid = slerp_shortest(&a, &b, 0.5);
        assert!(rotations_close(&mid, &Rotation::identity()));
    }

    #[test]
    fn track_rejects_bad_timestamps() {
        let p = |t| Pose::new(t, Vec3::zeros(), Rotation::identity());
        assert!(PoseTrack::new("r", vec![p(0.0), p(0.0)]).is_err());
        assert!(PoseTrack::new("r", vec![p(1.0), p(0.5)]).is_err());
        assert!(PoseTrack::new("r", vec![p(-1.0), p(0.5)]).is_err());
        let single = PoseTrack::new("r", vec![p(0.0)]).unwrap();
        assert!(matches!(
            interpolate_pose(&single, 0.0),
            Err(GeometryError::TooFewSamples(1))
        ));
    }

    fn observations_for(extrinsic: &RigidTransform, intr: &CameraIntrinsics) -> Vec<ExtrinsicObservation> {
        let truth = CameraModel { extrinsic: *extrinsic, ..identity_camera(*intr) };
        let mut out = Vec::new();
        for k in 0..12 {
            let ego = Pose::new(k as f64, Vec3::new(0.1 * k as f64, 0.0, 1.0), Rotation::identity());
            for (dx, dy, dz) in [(-0.4, 0.3, 2.0), (0.5, -0.2, 1.5), (0.0, 0.4, 3.0)] {
                let p_cam = Vec3::new(dx + 0.05 * k as f64, dy, dz);
                let p_world = truth.camera_to_world(&ego).transform_point(&p_cam.into()).coords;
                if let Some(center) = truth.observe_world_point(&ego, &p_world) {
                    out.push(ExtrinsicObservation {
                        ego_pose: ego,
                        neighbor_position: p_world,
                        observed_center: center,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn refinement_selects_zero_for_consistent_data() {
        let intr = intr_200();
        let cam = identity_camera(intr);
        let obs = observations_for(&cam.extrinsic, &intr);
        let grid = RotationGrid::cube(0.03, 0.01);
        let refined = refine_extrinsic_rotation(&obs, &cam, &grid).unwrap();
        assert!(rotations_close(&refined.rotation, &cam.extrinsic.rotation));
    }

    #[test]
    fn refinement_recovers_grid_perturbation() {
        let intr = intr_200();
        let cam = identity_camera(intr);
        let grid = RotationGrid::cube(0.05, 0.01);
        let (xs, ys, zs) = (grid.axis_values(0), grid.axis_values(1), grid.axis_values(2));
        let delta = Vec3::new(xs[7], ys[2], zs[5]);
        let truth = perturbed_extrinsic(&cam.extrinsic, &delta);
        let obs = observations_for(&truth, &intr);
        let refined = refine_extrinsic_rotation(&obs, &cam, &grid).unwrap();
        assert!(rotations_close(&refined.rotation, &truth.rotation));
        assert_eq!(refined.translation, cam.extrinsic.translation);
    }

    #[test]
    fn refinement_objective_is_minimal_over_grid() {
        let intr = intr_200();
        let cam = identity_camera(intr);
        let truth = perturbed_extrinsic(&cam.extrinsic, &Vec3::new(0.013, -0.021, 0.007));
        let obs = observations_for(&truth, &intr);
        let grid = RotationGrid::cube(0.03, 0.01);
        let refined = refine_extrinsic_rotation(&obs, &cam, &grid).unwrap();
        let best = reprojection_objective(&obs, &intr, &refined);
        for delta in grid.points() {
            let c = reprojection_objective(&obs, &intr, &perturbed_extrinsic(&cam.extrinsic, &delta));
            assert!(best <= c);
        }
    }

    #[test]
    fn refinement_errors() {
        let cam = identity_camera(intr_200());
        assert_eq!(
            refine_extrinsic_rotation(&[], &cam, &RotationGrid::default()),
            Err(GeometryError::NoObservations)
        );
        let bad = RotationGrid { step: [0.0; 3], ..Default::default() };
        assert!(matches!(
            refine_extrinsic_rotation(&[], &cam, &bad),
            Err(GeometryError::InvalidGrid(_))
        ));
    }

    #[test]
    fn default_grid_has_31_values_per_axis() {
        let g = RotationGrid::default();
        let xs = g.axis_values(0);
        assert_eq!(xs.len(), 31);
        assert_relative_eq!(xs[15], 0.0, epsilon = 1e-12);
        assert_relative_eq!(*xs.last().unwrap(), 0.15, epsilon = 1e-12);
    }

    #[test]
    fn transform_serde_round_trip() {
        let p = Pose::new(0.5, Vec3::new(0.1, -2.0, 3.3), yaw(1.234));
        let s = serde_json::to_string(&p).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
        let bad = r#"{"timestamp":0.0,"transform":{"translation":[0,0,0],"rotation":[2,0,0,0]}}"#;
        assert!(serde_json::from_str::<Pose>(bad).is_err());
    }
}
