//! Downwash safety condition and belief-based prediction.
//!
//! Robot `j` is in robot `i`'s downwash when `‖E⁻¹(p_i − p_j)‖ < 2` with
//! `E = diag(rx, ry, rz)`.
//!
//! The ego cannot see its whole surroundings at once, so it keeps a belief
//! set of world-frame neighbor positions. Each frame, beliefs that fall in
//! the current field of view are dropped, the new detections are added and
//! nearby beliefs are merged. A downwash event is predicted whenever any
//! belief violates the ellipsoid condition with the ego.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    annotate_frame, CameraModel, FrameAnnotation, GeometryError, Pose, PoseTrack, RobotGeometry, RobotPose, Vec3,
};
use crate::perception::{decode_output, oracle_estimates, simulate_detector, DetectorMode, NoiseModel, PositionEstimate};

/// Margin below which two robots are in each other's downwash.
pub const SAFETY_MARGIN: f64 = 2.0;
/// Beliefs closer than this [m] to a new detection are replaced by it.
pub const MERGE_RADIUS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DownwashError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Perception(#[from] crate::perception::PerceptionError),
    #[error("ego index {index} out of range for {count} tracks")]
    InvalidEgo { index: usize, count: usize },
    #[error("invalid ellipsoid radii {0:?}")]
    InvalidEllipsoid([f64; 3]),
}

/// Semi-axes [m] of the downwash ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSpec {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl Default for EllipsoidSpec {
    fn default() -> Self {
        Self::new(0.15, 0.15, 0.3)
    }
}

impl EllipsoidSpec {
    pub fn new(rx: f64, ry: f64, rz: f64) -> Self {
        Self { rx, ry, rz }
    }

    pub fn validate(&self) -> Result<(), DownwashError> {
        let r = [self.rx, self.ry, self.rz];
        if r.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(DownwashError::InvalidEllipsoid(r))
        }
    }
}

/// `‖E⁻¹(p_i − p_j)‖`.
pub fn ellipsoid_margin(p_i: &Vec3, p_j: &Vec3, e: &EllipsoidSpec) -> f64 {
    let d = p_i - p_j;
    Vec3::new(d.x / e.rx, d.y / e.ry, d.z / e.rz).norm()
}

pub fn violates(p_i: &Vec3, p_j: &Vec3, e: &EllipsoidSpec) -> bool {
    ellipsoid_margin(p_i, p_j, e) < SAFETY_MARGIN
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    /// World-frame position.
    pub position: Vec3,
    /// Time the belief was last confirmed.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSet {
    beliefs: Vec<Belief>,
    merge_radius: f64,
}

impl Default for BeliefSet {
    fn default() -> Self {
        Self::new()
    }
}

impl BeliefSet {
    pub fn new() -> Self {
        Self::with_merge_radius(MERGE_RADIUS)
    }

    pub fn with_merge_radius(merge_radius: f64) -> Self {
        Self {
            beliefs: Vec::new(),
            merge_radius,
        }
    }

    pub fn len(&self) -> usize {
        self.beliefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }

    pub fn beliefs(&self) -> &[Belief] {
        &self.beliefs
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.beliefs.iter().map(|b| b.position)
    }

    /// Next belief set: drops every belief for which `observable` holds,
    /// then inserts `detections`, each replacing beliefs within the merge
    /// radius.
    pub fn updated<F>(&self, observable: F, detections: &[Vec3], timestamp: f64) -> BeliefSet
    where
        F: Fn(&Vec3) -> bool,
    {
        let mut beliefs: Vec<Belief> = self.beliefs.iter().copied().filter(|b| !observable(&b.position)).collect();
        for p in detections {
            beliefs.retain(|b| (b.position - p).norm() >= self.merge_radius);
            beliefs.push(Belief { position: *p, timestamp });
        }
        BeliefSet {
            beliefs,
            merge_radius: self.merge_radius,
        }
    }
}

/// Belief update from camera-frame detections. A belief is considered
/// observable when it projects into the current image.
pub fn update_belief(
    beliefs: &BeliefSet,
    ego_pose: &Pose,
    camera: &CameraModel,
    predictions: &[PositionEstimate],
) -> BeliefSet {
    let to_world = camera.camera_to_world(ego_pose);
    let world: Vec<Vec3> = predictions
        .iter()
        .map(|e| to_world.transform_point(&e.position.into()).coords)
        .collect();
    beliefs.updated(
        |p| camera.observe_world_point(ego_pose, p).is_some(),
        &world,
        ego_pose.timestamp,
    )
}

/// True when any belief violates the ellipsoid condition with the ego.
pub fn predict_downwash(beliefs: &BeliefSet, ego_position: &Vec3, e: &EllipsoidSpec) -> bool {
    beliefs.positions().any(|p| violates(ego_position, &p, e))
}

/// Ground-truth downwash state of the ego against its neighbors.
pub fn ground_truth_downwash(ego: &Vec3, neighbors: &[RobotPose], e: &EllipsoidSpec) -> bool {
    neighbors.iter().any(|n| violates(ego, &n.pose.position(), e))
}

/// Source of per-frame neighbor positions.
#[derive(Debug, Clone, PartialEq)]
pub enum Perception {
    /// Annotated camera-frame positions of visible neighbors.
    Oracle,
    /// True positions of every neighbor, regardless of field of view.
    Omnidirectional,
    /// Simulated detector output, decoded.
    Simulated {
        noise: NoiseModel,
        mode: DetectorMode,
        sphere_radius: f64,
        threshold: f64,
    },
}

/// Everything known about one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub ego: RobotPose,
    pub neighbors: Vec<RobotPose>,
    pub annotation: FrameAnnotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownwashFrameResult {
    pub frame_id: u64,
    pub gt_downwash: bool,
    pub pred_downwash: bool,
}

/// Interpolates all tracks at each frame time and annotates the ego view.
pub fn build_frames(
    tracks: &[PoseTrack],
    ego_index: usize,
    camera: &CameraModel,
    geom: &RobotGeometry,
    frame_times: &[f64],
) -> Result<Vec<FrameInput>, DownwashError> {
    if ego_index >= tracks.len() {
        return Err(DownwashError::InvalidEgo {
            index: ego_index,
            count: tracks.len(),
        });
    }
    frame_times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut ego = None;
            let mut neighbors = Vec::with_capacity(tracks.len() - 1);
            for (i, track) in tracks.iter().enumerate() {
                let rp = RobotPose {
                    robot_id: track.robot_id().to_string(),
                    pose: track.interpolate(t)?,
                };
                if i == ego_index {
                    ego = Some(rp);
                } else {
                    neighbors.push(rp);
                }
            }
            let ego = ego.expect("ego index checked");
            let annotation = annotate_frame(k as u64, &ego, &neighbors, camera, geom);
            Ok(FrameInput {
                ego,
                neighbors,
                annotation,
            })
        })
        .collect()
}

/// Runs the belief filter over consecutive frames.
pub fn evaluate_frames(
    frames: &[FrameInput],
    camera: &CameraModel,
    perception: &Perception,
    e: &EllipsoidSpec,
) -> Result<Vec<DownwashFrameResult>, DownwashError> {
    e.validate()?;
    let mut beliefs = BeliefSet::new();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let ego_pose = &f.ego.pose;
        beliefs = match perception {
            Perception::Omnidirectional => {
                let all: Vec<Vec3> = f.neighbors.iter().map(|n| n.pose.position()).collect();
                beliefs.updated(|_| true, &all, ego_pose.timestamp)
            }
            Perception::Oracle => update_belief(&beliefs, ego_pose, camera, &oracle_estimates(&f.annotation)),
            Perception::Simulated {
                noise,
                mode,
                sphere_radius,
                threshold,
            } => {
                let output = simulate_detector(&f.annotation, noise, &camera.intrinsics, *mode, *sphere_radius)?;
                let est = decode_output(&output, &camera.intrinsics, *sphere_radius, *threshold);
                update_belief(&beliefs, ego_pose, camera, &est)
            }
        };
        let ego_position = ego_pose.position();
        out.push(DownwashFrameResult {
            frame_id: f.annotation.frame_id,
            gt_downwash: ground_truth_downwash(&ego_position, &f.neighbors, e),
            pred_downwash: predict_downwash(&beliefs, &ego_position, e),
        });
    }
    Ok(out)
}

/// Builds frames from tracks and evaluates them.
#[allow(clippy::too_many_arguments)]
pub fn run_downwash_eval(
    tracks: &[PoseTrack],
    ego_index: usize,
    camera: &CameraModel,
    geom: &RobotGeometry,
    frame_times: &[f64],
    perception: &Perception,
    e: &EllipsoidSpec,
) -> Result<Vec<DownwashFrameResult>, DownwashError> {
    let frames = build_frames(tracks, ego_index, camera, geom, frame_times)?;
    evaluate_frames(&frames, camera, perception, e)
}
