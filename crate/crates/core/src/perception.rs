//! Detection decoding and a seeded detector simulator.
//!
//! Two decoders turn detector output into camera-frame positions:
//!
//! - the box decoder assumes the neighbor is a sphere of known radius `r`.
//!   With `a1`, `a2` the unit rays through the midpoints of the left and
//!   right box edges and `α` the angle between them, the distance to the
//!   sphere center is `d = r·csc(α/2)` and the position is
//!   `d·(a1 + a2)/‖a1 + a2‖`.
//! - the grid decoder reads a confidence map and a depth map, picks local
//!   confidence peaks above a threshold and lifts each peak's cell center
//!   with its depth through the inverse pinhole model.
//!
//! [`simulate_detector`] replaces the neural networks with ground truth plus
//! configurable misses, jitter and false positives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    back_project, pixel_ray, BoundingBox, CameraIntrinsics, FrameAnnotation, ImagePoint, Vec3,
};

pub const DEFAULT_GRID_ROWS: usize = 28;
pub const DEFAULT_GRID_COLS: usize = 40;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Depth range [m] for simulated false positives.
const FALSE_POSITIVE_DEPTH: (f64, f64) = (0.5, 4.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("degenerate bounding box: rays subtend angle {0} rad")]
    DegenerateBox(f64),
    #[error("invalid detection map: {0}")]
    InvalidMap(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDetection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Two-channel detector output on a `rows × cols` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDetectionMap {
    rows: usize,
    cols: usize,
    confidence: Vec<f64>,
    depth: Vec<f64>,
}

impl GridDetectionMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            confidence: vec![0.0; rows * cols],
            depth: vec![0.0; rows * cols],
        }
    }

    pub fn from_channels(rows: usize, cols: usize, confidence: Vec<f64>, depth: Vec<f64>) -> Result<Self, PerceptionError> {
        let map = Self { rows, cols, confidence, depth };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(PerceptionError::InvalidMap("grid must have at least one cell".into()));
        }
        let n = self.rows * self.cols;
        if self.confidence.len() != n || self.depth.len() != n {
            return Err(PerceptionError::InvalidMap(format!(
                "expected {n} cells per channel, got {} and {}",
                self.confidence.len(),
                self.depth.len()
            )));
        }
        if self.confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(PerceptionError::InvalidMap("confidence outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn confidence(&self, row: usize, col: usize) -> f64 {
        self.confidence[row * self.cols + col]
    }

    pub fn depth(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, confidence: f64, depth: f64) {
        let i = row * self.cols + col;
        self.confidence[i] = confidence;
        self.depth[i] = depth;
    }

    /// `(row, col, confidence, depth)` of every cell with non-zero confidence.
    pub fn nonzero_cells(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.confidence
            .iter()
            .zip(&self.depth)
            .enumerate()
            .filter(|(_, (c, _))| **c != 0.0)
            .map(move |(i, (c, d))| (i / self.cols, i % self.cols, *c, *d))
    }

    /// Pixel at the center of a cell.
    pub fn cell_center(&self, row: usize, col: usize, intr: &CameraIntrinsics) -> ImagePoint {
        ImagePoint::new(
            (col as f64 + 0.5) * f64::from(intr.width) / self.cols as f64,
            (row as f64 + 0.5) * f64::from(intr.height) / self.rows as f64,
        )
    }

    /// Cell containing a pixel, or `None` outside the image.
    pub fn cell_of(&self, pixel: &ImagePoint, intr: &CameraIntrinsics) -> Option<(usize, usize)> {
        let (w, h) = (f64::from(intr.width), f64::from(intr.height));
        if !(pixel.u >= 0.0 && pixel.u < w && pixel.v >= 0.0 && pixel.v < h) {
            return None;
        }
        let col = ((pixel.u * self.cols as f64 / w).floor() as usize).min(self.cols - 1);
        let row = ((pixel.v * self.rows as f64 / h).floor() as usize).min(self.rows - 1);
        Some((row, col))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    BoxDecoder,
    GridDecoder,
    Oracle,
}

/// Estimated neighbor position in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub position: Vec3,
    pub source: EstimateSource,
}

/// Error characteristics of the simulated detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Standard deviation of pixel jitter on box edges or cell centers.
    pub pixel_sigma: f64,
    /// Relative standard deviation of grid depth predictions.
    pub depth_rel_sigma: f64,
    /// Probability of dropping a true neighbor.
    pub miss_rate: f64,
    /// Expected number of false positives per frame.
    pub false_positive_rate: f64,
    pub true_confidence: (f64, f64),
    pub false_confidence: (f64, f64),
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            depth_rel_sigma: 0.1,
            miss_rate: 0.1,
            false_positive_rate: 0.05,
            true_confidence: (0.6, 1.0),
            false_confidence: (0.5, 0.8),
            seed: 0,
        }
    }
}

impl NoiseModel {
    /// Perfect detector.
    pub fn noiseless() -> Self {
        Self {
            pixel_sigma: 0.0,
            depth_rel_sigma: 0.0,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            true_confidence: (1.0, 1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |m: &str| Err(PerceptionError::InvalidNoise(m.into()));
        if !(self.pixel_sigma >= 0.0 && self.pixel_sigma.is_finite()) {
            return bad("pixel_sigma must be a non-negative number");
        }
        if !(self.depth_rel_sigma >= 0.0 && self.depth_rel_sigma.is_finite()) {
            return bad("depth_rel_sigma must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return bad("miss_rate must be in [0, 1]");
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return bad("false_positive_rate must be a non-negative number");
        }
        for (lo, hi) in [self.true_confidence, self.false_confidence] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad("confidence ranges must satisfy 0 <= lo <= hi <= 1");
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, PerceptionError> {
        let model: Self = toml::from_str(text).map_err(|e| PerceptionError::InvalidNoise(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Box,
    Grid { rows: usize, cols: usize },
}

impl DetectorMode {
    pub fn default_grid() -> Self {
        DetectorMode::Grid {
            rows: DEFAULT_GRID_ROWS,
            cols: DEFAULT_GRID_COLS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DetectorOutput {
    Boxes(Vec<BoxDetection>),
    Grid(GridDetectionMap),
}

/// Distance to the center of a sphere of radius `r` that subtends `alpha`.
pub fn distance_from_subtense(alpha: f64, r: f64) -> Result<f64, PerceptionError> {
    if !(alpha > 0.0 && alpha <= std::f64::consts::PI) {
        return Err(PerceptionError::DegenerateBox(alpha));
    }
    Ok(r / (0.5 * alpha).sin())
}

/// Position of a detected sphere of radius `r` from its bounding box.
pub fn decode_box(det: &BoxDetection, intr: &CameraIntrinsics, r: f64) -> Result<PositionEstimate, PerceptionError> {
    let b = &det.bbox;
    if !(b.width() > 0.0) {
        return Err(PerceptionError::DegenerateBox(0.0));
    }
    let v_mid = 0.5 * (b.v_min + b.v_max);
    let a1 = pixel_ray(&ImagePoint::new(b.u_min, v_mid), intr);
    let a2 = pixel_ray(&ImagePoint::new(b.u_max, v_mid), intr);
    let alpha = a1.cross(&a2).norm().atan2(a1.dot(&a2));
    let d = distance_from_subtense(alpha, r)?;
    let ac = (a1 + a2) * 0.5;
    Ok(PositionEstimate {
        position: ac.normalize() * d,
        source: EstimateSource::BoxDecoder,
    })
}

/// Peaks of the confidence map at or above `threshold`, lifted to 3D.
///
/// A cell is a peak if it is strictly greater than its 8-neighbors that come
/// earlier in row-major order and no smaller than the later ones, so a
/// plateau yields a single detection. Cells with non-positive depth are
/// skipped.
pub fn decode_grid(map: &GridDetectionMap, intr: &CameraIntrinsics, threshold: f64) -> Vec<PositionEstimate> {
    let (rows, cols) = (map.rows(), map.cols());
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let conf = map.confidence(r, c);
            if !(conf >= threshold) || !is_peak(map, r, c) {
                continue;
            }
            let depth = map.depth(r, c);
            if let Ok(position) = back_project(&map.cell_center(r, c, intr), depth, intr) {
                out.push(PositionEstimate {
                    position,
                    source: EstimateSource::GridDecoder,
                });
            }
        }
    }
    out
}

fn is_peak(map: &GridDetectionMap, r: usize, c: usize) -> bool {
    let conf = map.confidence(r, c);
    let here = r * map.cols() + c;
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= map.rows() as i64 || nc >= map.cols() as i64 {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            let other = map.confidence(nr, nc);
            let earlier = nr * map.cols() + nc < here;
            if other > conf || (earlier && other == conf) {
                return false;
            }
        }
    }
    true
}

/// Training-target map for an annotation: confidence 1 and camera depth in
/// the cell holding each neighbor's center. When two neighbors share a
/// cell the nearer one is kept.
pub fn encode_grid(annotation: &FrameAnnotation, intr: &CameraIntrinsics, rows: usize, cols: usize) -> GridDetectionMap {
    let mut map = GridDetectionMap::zeros(rows, cols);
    for n in &annotation.neighbors {
        if let Some((r, c)) = map.cell_of(&n.center, intr) {
            place_nearer(&mut map, r, c, 1.0, n.rel_position.z);
        }
    }
    map
}

fn place_nearer(map: &mut GridDetectionMap, r: usize, c: usize, confidence: f64, depth: f64) {
    if map.confidence(r, c) == 0.0 || depth < map.depth(r, c) {
        map.set(r, c, confidence, depth);
    }
}

/// Exact image bounding box of a sphere's silhouette (for `k1 = 0`).
///
/// Each vertical box edge is the image of a plane `x = a·z` through the
/// camera center tangent to the sphere, which gives a quadratic in `a`;
/// horizontal edges likewise. With distortion the four tangent points are
/// distorted and boxed. `None` when the camera is within `r` of the center
/// plane-wise (the silhouette is unbounded).
pub fn sphere_bbox(center: &Vec3, r: f64, intr: &CameraIntrinsics) -> Option<BoundingBox> {
    let cz = center.z;
    if !(cz > r) {
        return None;
    }
    let denom = cz * cz - r * r;
    let tangent_points = |lateral: f64, other: f64| -> Option<[(f64, f64); 2]> {
        let reach = lateral * lateral + cz * cz - r * r;
        if reach <= 0.0 {
            return None;
        }
        let root = r * reach.sqrt();
        let mut out = [(0.0, 0.0); 2];
        for (k, a) in [(lateral * cz - root) / denom, (lateral * cz + root) / denom].into_iter().enumerate() {
            // Tangent point: center minus its signed distance along the plane normal.
            let norm = (1.0 + a * a).sqrt();
            let dist = (lateral - a * cz) / norm;
            let t_lat = lateral - dist / norm;
            let t_z = cz + dist * a / norm;
            debug_assert!((t_lat / t_z - a).abs() < 1e-9);
            out[k] = (a, other / t_z);
        }
        Some(out)
    };
    let horizontal = tangent_points(center.x, center.y)?;
    let vertical = tangent_points(center.y, center.x)?;
    let points = horizontal
        .iter()
        .map(|&(x, y)| (x, y))
        .chain(vertical.iter().map(|&(y, x)| (x, y)))
        .map(|(x, y)| {
            let (xd, yd) = intr.distort(x, y);
            ImagePoint::new(intr.fx * xd + intr.cx, intr.fy * yd + intr.cy)
        });
    BoundingBox::enclosing(points)
}

/// Ground-truth positions of the annotated neighbors.
pub fn oracle_estimates(annotation: &FrameAnnotation) -> Vec<PositionEstimate> {
    annotation
        .neighbors
        .iter()
        .map(|n| PositionEstimate {
            position: n.rel_position,
            source: EstimateSource::Oracle,
        })
        .collect()
}

/// Decodes whatever the detector produced. Undecodable boxes are dropped.
pub fn decode_output(output: &DetectorOutput, intr: &CameraIntrinsics, r: f64, threshold: f64) -> Vec<PositionEstimate> {
    match output {
        DetectorOutput::Boxes(boxes) => boxes.iter().filter_map(|b| decode_box(b, intr, r).ok()).collect(),
        DetectorOutput::Grid(map) => decode_grid(map, intr, threshold),
    }
}

fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
    } else {
        0.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Simulated detector output for one annotated frame.
///
/// Boxes are the silhouettes of spheres of radius `radius` around each
/// neighbor center, which is the shape the box decoder assumes. The random
/// stream depends only on the noise seed and the frame id.
pub fn simulate_detector(
    annotation: &FrameAnnotation,
    noise: &NoiseModel,
    intr: &CameraIntrinsics,
    mode: DetectorMode,
    radius: f64,
) -> Result<DetectorOutput, PerceptionError> {
    noise.validate()?;
    let mut rng = frame_rng(noise.seed, annotation.frame_id);
    let fp_count = if noise.false_positive_rate > 0.0 {
        Poisson::new(noise.false_positive_rate)
            .map_err(|e| PerceptionError::InvalidNoise(e.to_string()))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let (w, h) = (f64::from(intr.width), f64::from(intr.height));
    match mode {
        DetectorMode::Box => {
            let mut boxes = Vec::new();
            for n in &annotation.neighbors {
                if rng.random::<f64>() < noise.miss_rate {
                    continue;
                }
                let Some(b) = sphere_bbox(&n.rel_position, radius, intr) else {
                    continue;
                };
                let jittered = BoundingBox::new(
                    b.u_min + gaussian(&mut rng, noise.pixel_sigma),
                    b.v_min + gaussian(&mut rng, noise.pixel_sigma),
                    b.u_max + gaussian(&mut rng, noise.pixel_sigma),
                    b.v_max + gaussian(&mut rng, noise.pixel_sigma),
                )
                .clip(intr.width, intr.height);
                let confidence = uniform(&mut rng, noise.true_confidence);
                if jittered.width() > 0.0 && jittered.height() > 0.0 {
                    boxes.push(BoxDetection { bbox: jittered, confidence });
                }
            }
            for _ in 0..fp_count {
                let px = ImagePoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
                let depth = uniform(&mut rng, FALSE_POSITIVE_DEPTH);
                let confidence = uniform(&mut rng, noise.false_confidence);
                let center = back_project(&px, depth, intr).expect("positive depth");
                if let Some(b) = sphere_bbox(&center, radius, intr) {
                    let b = b.clip(intr.width, intr.height);
                    if b.width() > 0.0 && b.height() > 0.0 {
                        boxes.push(BoxDetection { bbox: b, confidence });
                    }
                }
            }
            Ok(DetectorOutput::Boxes(boxes))
        }
        DetectorMode::Grid { rows, cols } => {
            if rows == 0 || cols == 0 {
                return Err(PerceptionError::InvalidMap("grid must have at least one cell".into()));
            }
            let mut map = GridDetectionMap::zeros(rows, cols);
            for n in &annotation.neighbors {
                if rng.random::<f64>() < noise.miss_rate {
                    continue;
                }
                let px = ImagePoint::new(
                    n.center.u + gaussian(&mut rng, noise.pixel_sigma),
                    n.center.v + gaussian(&mut rng, noise.pixel_sigma),
                );
                let z = n.rel_position.z;
                let depth = (z * (1.0 + gaussian(&mut rng, noise.depth_rel_sigma))).max(0.1 * z);
                let confidence = uniform(&mut rng, noise.true_confidence);
                if let Some((r, c)) = map.cell_of(&px, intr) {
                    place_nearer(&mut map, r, c, confidence, depth);
                }
            }
            for _ in 0..fp_count {
                let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
                let depth = uniform(&mut rng, FALSE_POSITIVE_DEPTH);
                let confidence = uniform(&mut rng, noise.false_confidence);
                if map.confidence(r, c) == 0.0 {
                    map.set(r, c, confidence, depth);
                }
            }
            Ok(DetectorOutput::Grid(map))
        }
    }
}
