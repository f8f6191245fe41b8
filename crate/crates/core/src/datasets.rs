//! File formats and log ingestion.
//!
//! | file            | layout                                                     |
//! |-----------------|------------------------------------------------------------|
//! | scenario config | flat TOML, see [`ScenarioConfig`]                          |
//! | dataset         | NDJSON: header, one record per track, one per frame        |
//! | labels          | NDJSON: header, one record per frame                       |
//! | report          | CSV `frame_id,gt_downwash,pred_downwash` + comment lines   |
//! | pose log        | CSV `robot_id,t,x,y,z,qw,qx,qy,qz`                         |
//! | gyro log        | CSV `t,wx,wy,wz`                                           |
//!
//! Floats are written in shortest round-trip form, so every reader is an
//! exact inverse of its writer.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::downwash::{DownwashFrameResult, EllipsoidSpec, FrameInput};
use crate::dynamics::ScenarioConfig;
use crate::eval::{classification_metrics, ConfusionCounts};
use crate::geometry::{
    BoundingBox, CameraIntrinsics, CameraModel, FrameAnnotation, GeometryError, ImagePoint, Pose, PoseTrack,
    RobotGeometry, RobotPose, Rotation, Vec3,
};
use crate::perception::encode_grid;

pub const SCHEMA_VERSION: u32 = 1;

/// Quaternions further than this from unit norm are reported when ingested.
const QUATERNION_NORM_WARNING: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported schema version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("non-finite value at line {line}: {field}")]
    NonFiniteValue { line: usize, field: String },
    #[error("invalid track {robot_id}: {source}")]
    InvalidTrack { robot_id: String, source: GeometryError },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("sequences overlap by {overlap:.4} s for every offset, need {required:.4} s")]
    InsufficientOverlap { overlap: f64, required: f64 },
    #[error("frame {frame_id}: ego {ego_id} has no world pose")]
    MissingEgo { frame_id: u64, ego_id: String },
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Parse {
        line,
        message: e.to_string(),
    }
}

/// One annotated frame with the world poses of every robot at frame time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub annotation: FrameAnnotation,
    pub world_poses: Vec<RobotPose>,
}

impl AnnotationRecord {
    /// Splits the world poses into ego and neighbors.
    pub fn to_frame_input(&self) -> Result<FrameInput, DatasetError> {
        let ego_id = &self.annotation.ego_id;
        let ego = self
            .world_poses
            .iter()
            .find(|p| &p.robot_id == ego_id)
            .cloned()
            .ok_or_else(|| DatasetError::MissingEgo {
                frame_id: self.annotation.frame_id,
                ego_id: ego_id.clone(),
            })?;
        Ok(FrameInput {
            ego,
            neighbors: self.world_poses.iter().filter(|p| &p.robot_id != ego_id).cloned().collect(),
            annotation: self.annotation.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub camera: CameraModel,
    pub geometry: RobotGeometry,
    pub ellipsoid: EllipsoidSpec,
    /// Scenario that produced the data, if simulated.
    pub scenario: Option<ScenarioConfig>,
    pub tracks: Vec<PoseTrack>,
    pub frames: Vec<AnnotationRecord>,
}

impl Dataset {
    pub fn frame_inputs(&self) -> Result<Vec<FrameInput>, DatasetError> {
        self.frames.iter().map(AnnotationRecord::to_frame_input).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    camera: CameraModel,
    geometry: RobotGeometry,
    ellipsoid: EllipsoidSpec,
    scenario: Option<ScenarioConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Track { robot_id: String, samples: Vec<Pose> },
    Frame(AnnotationRecord),
}

/// Version check that runs before the rest of the header is interpreted.
#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

fn check_version(line: usize, text: &str) -> Result<(), DatasetError> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| parse_err(line, e))?;
    if probe.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: probe.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<(), DatasetError> {
    serde_json::to_writer(&mut *w, value).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(w: &mut W, ds: &Dataset) -> Result<(), DatasetError> {
    write_json_line(
        w,
        &Header {
            schema_version: SCHEMA_VERSION,
            camera: ds.camera,
            geometry: ds.geometry,
            ellipsoid: ds.ellipsoid,
            scenario: ds.scenario.clone(),
        },
    )?;
    for t in &ds.tracks {
        write_json_line(
            w,
            &Record::Track {
                robot_id: t.robot_id().to_string(),
                samples: t.samples().to_vec(),
            },
        )?;
    }
    for f in &ds.frames {
        write_json_line(w, &Record::Frame(f.clone()))?;
    }
    Ok(())
}

pub fn read_dataset_from<R: BufRead>(r: R) -> Result<Dataset, DatasetError> {
    let mut lines = r.lines();
    let header_text = match lines.next() {
        Some(l) => l?,
        None => return Err(parse_err(1, "missing header record")),
    };
    check_version(1, &header_text)?;
    let header: Header = serde_json::from_str(&header_text).map_err(|e| parse_err(1, e))?;
    let mut ds = Dataset {
        camera: header.camera,
        geometry: header.geometry,
        ellipsoid: header.ellipsoid,
        scenario: header.scenario,
        tracks: Vec::new(),
        frames: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&text).map_err(|e| parse_err(line_no, e))? {
            Record::Track { robot_id, samples } => {
                let track = PoseTrack::new(robot_id.clone(), samples)
                    .map_err(|source| DatasetError::InvalidTrack { robot_id, source })?;
                ds.tracks.push(track);
            }
            Record::Frame(f) => ds.frames.push(f),
        }
    }
    Ok(ds)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

pub fn read_scenario_config(path: &Path) -> Result<ScenarioConfig, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    ScenarioConfig::from_toml(&text).map_err(|e| parse_err(0, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Bbox,
    Grid { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub robot_id: String,
    pub center: ImagePoint,
    pub bbox: BoundingBox,
}

/// One labelled frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelRecord {
    Boxes {
        frame_id: u64,
        labels: Vec<BoxLabel>,
    },
    /// Sparse grid target: `(row, col, confidence, depth)` of non-zero cells.
    Grid {
        frame_id: u64,
        cells: Vec<(usize, usize, f64, f64)>,
    },
}

#[derive(Serialize, Deserialize)]
struct LabelHeader {
    schema_version: u32,
    mode: LabelMode,
}

pub fn label_records(annotations: &[FrameAnnotation], intr: &CameraIntrinsics, mode: LabelMode) -> Vec<LabelRecord> {
    annotations
        .iter()
        .map(|a| match mode {
            LabelMode::Bbox => LabelRecord::Boxes {
                frame_id: a.frame_id,
                labels: a
                    .neighbors
                    .iter()
                    .map(|n| BoxLabel {
                        robot_id: n.robot_id.clone(),
                        center: n.center,
                        bbox: n.bbox,
                    })
                    .collect(),
            },
            LabelMode::Grid { rows, cols } => LabelRecord::Grid {
                frame_id: a.frame_id,
                cells: encode_grid(a, intr, rows, cols).nonzero_cells().collect(),
            },
        })
        .collect()
}

pub fn export_labels(
    annotations: &[FrameAnnotation],
    intr: &CameraIntrinsics,
    mode: LabelMode,
    path: &Path,
) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_json_line(&mut w, &LabelHeader { schema_version: SCHEMA_VERSION, mode })?;
    for rec in label_records(annotations, intr, mode) {
        write_json_line(&mut w, &rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(LabelMode, Vec<LabelRecord>), DatasetError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_text = lines.next().ok_or_else(|| parse_err(1, "missing header record"))??;
    check_version(1, &header_text)?;
    let header: LabelHeader = serde_json::from_str(&header_text).map_err(|e| parse_err(1, e))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let text = line?;
        records.push(serde_json::from_str(&text).map_err(|e| parse_err(i + 2, e))?);
    }
    Ok((header.mode, records))
}

fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.4}")
    }
}

pub fn write_report_to<W: Write>(w: &mut W, results: &[DownwashFrameResult]) -> Result<(), DatasetError> {
    writeln!(w, "# downwash report schema_version={SCHEMA_VERSION}")?;
    writeln!(w, "frame_id,gt_downwash,pred_downwash")?;
    for r in results {
        writeln!(w, "{},{},{}", r.frame_id, u8::from(r.gt_downwash), u8::from(r.pred_downwash))?;
    }
    let c = ConfusionCounts::from_results(results);
    let m = classification_metrics(&c);
    writeln!(
        w,
        "# tp={} fp={} fn={} tn={} precision={} recall={} f1={}",
        c.true_pos,
        c.false_pos,
        c.false_neg,
        c.true_neg,
        fmt_metric(m.precision),
        fmt_metric(m.recall),
        fmt_metric(m.f1)
    )?;
    Ok(())
}

pub fn write_report(path: &Path, results: &[DownwashFrameResult]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_report_to(&mut w, results)?;
    w.flush()?;
    Ok(())
}

/// Per-frame rows of a report, ignoring comment lines.
pub fn read_report(path: &Path) -> Result<Vec<DownwashFrameResult>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.split("schema_version=").nth(1) {
                let found: u32 = v.trim().parse().map_err(|e| parse_err(line_no, e))?;
                if found != SCHEMA_VERSION {
                    return Err(DatasetError::VersionMismatch {
                        found,
                        expected: SCHEMA_VERSION,
                    });
                }
            }
            continue;
        }
        if !seen_header {
            if line != "frame_id,gt_downwash,pred_downwash" {
                return Err(parse_err(line_no, "expected column header"));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(parse_err(line_no, format!("bad flag {other:?}"))),
        };
        if fields.len() != 3 {
            return Err(parse_err(line_no, "expected 3 fields"));
        }
        rows.push(DownwashFrameResult {
            frame_id: fields[0].parse().map_err(|e| parse_err(line_no, e))?,
            gt_downwash: flag(fields[1])?,
            pred_downwash: flag(fields[2])?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Deserialize, Serialize)]
struct PoseRow {
    robot_id: String,
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

fn csv_line(e: &csv::Error) -> usize {
    e.position().map_or(0, |p| p.line() as usize)
}

/// Reads a motion-capture pose log. Rows may be interleaved across robots
/// and in any time order; tracks come back sorted by robot id.
pub fn ingest_pose_log_from<R: io::Read>(r: R) -> Result<Vec<PoseTrack>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut groups: BTreeMap<String, Vec<Pose>> = BTreeMap::new();
    let headers = reader.headers().map_err(|e| parse_err(1, e))?.clone();
    let mut record = csv::StringRecord::new();
    while reader.read_record(&mut record).map_err(|e| parse_err(csv_line(&e), e))? {
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row: PoseRow = record.deserialize(Some(&headers)).map_err(|e| parse_err(line, e))?;
        let values = [row.t, row.x, row.y, row.z, row.qw, row.qx, row.qy, row.qz];
        let names = ["t", "x", "y", "z", "qw", "qx", "qy", "qz"];
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFiniteValue {
                line,
                field: names[k].into(),
            });
        }
        let q = nalgebra::Quaternion::new(row.qw, row.qx, row.qy, row.qz);
        let norm = q.norm();
        if norm == 0.0 {
            return Err(DatasetError::NonFiniteValue {
                line,
                field: "quaternion norm is zero".into(),
            });
        }
        if (norm - 1.0).abs() > QUATERNION_NORM_WARNING {
            log::warn!("line {line}: quaternion norm {norm:.6} renormalized");
        }
        let pose = Pose::new(row.t, Vec3::new(row.x, row.y, row.z), Rotation::from_quaternion(q));
        groups.entry(row.robot_id).or_default().push(pose);
    }
    groups
        .into_iter()
        .map(|(robot_id, mut samples)| {
            samples.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            PoseTrack::new(robot_id.clone(), samples).map_err(|source| DatasetError::InvalidTrack { robot_id, source })
        })
        .collect()
}

pub fn ingest_pose_log(path: &Path) -> Result<Vec<PoseTrack>, DatasetError> {
    ingest_pose_log_from(File::open(path)?)
}

pub fn write_pose_log_to<W: Write>(w: W, tracks: &[PoseTrack]) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_writer(w);
    for t in tracks {
        for s in t.samples() {
            let p = s.position();
            let q = s.rotation().into_inner();
            writer
                .serialize(PoseRow {
                    robot_id: t.robot_id().to_string(),
                    t: s.timestamp,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                    qw: q.w,
                    qx: q.i,
                    qy: q.j,
                    qz: q.k,
                })
                .map_err(io::Error::from)?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn write_pose_log(path: &Path, tracks: &[PoseTrack]) -> Result<(), DatasetError> {
    write_pose_log_to(File::create(path)?, tracks)
}

/// Angular-rate samples from a gyroscope.
#[derive(Debug, Clone, PartialEq)]
pub struct GyroSequence {
    timestamps: Vec<f64>,
    rates: Vec<Vec3>,
}

#[derive(Debug, Deserialize, Serialize)]
struct GyroRow {
    t: f64,
    wx: f64,
    wy: f64,
    wz: f64,
}

impl GyroSequence {
    pub fn new(timestamps: Vec<f64>, rates: Vec<Vec3>) -> Result<Self, DatasetError> {
        if timestamps.len() != rates.len() {
            return Err(DatasetError::InvalidSequence(format!(
                "{} timestamps but {} samples",
                timestamps.len(),
                rates.len()
            )));
        }
        if timestamps.len() < 2 {
            return Err(DatasetError::InvalidSequence("need at least two samples".into()));
        }
        if timestamps.iter().any(|t| !t.is_finite()) || rates.iter().any(|r| !r.iter().all(|v| v.is_finite())) {
            return Err(DatasetError::InvalidSequence("non-finite sample".into()));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DatasetError::InvalidSequence(format!(
                "timestamps not strictly increasing at sample {}",
                i + 1
            )));
        }
        Ok(Self { timestamps, rates })
    }

    /// Samples `f(t)` on `n` points starting at `t0` with spacing `dt`.
    pub fn sampled(t0: f64, dt: f64, n: usize, f: impl Fn(f64) -> Vec3) -> Result<Self, DatasetError> {
        let timestamps: Vec<f64> = (0..n).map(|i| t0 + i as f64 * dt).collect();
        let rates = timestamps.iter().map(|&t| f(t)).collect();
        Self::new(timestamps, rates)
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn rates(&self) -> &[Vec3] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.timestamps[0]
    }

    pub fn end(&self) -> f64 {
        self.timestamps[self.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.end() - self.start()
    }

    /// Mean sample period.
    pub fn period(&self) -> f64 {
        self.span() / (self.len() - 1) as f64
    }

    /// Linear interpolation; `None` outside the sampled span.
    pub fn at(&self, t: f64) -> Option<Vec3> {
        if !(t >= self.start() && t <= self.end()) {
            return None;
        }
        let i = self.timestamps.partition_point(|&s| s <= t);
        if i >= self.len() {
            return Some(self.rates[self.len() - 1]);
        }
        let (t0, t1) = (self.timestamps[i - 1], self.timestamps[i]);
        let s = (t - t0) / (t1 - t0);
        Some(self.rates[i - 1] * (1.0 - s) + self.rates[i] * s)
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<Self, DatasetError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let (mut ts, mut rs) = (Vec::new(), Vec::new());
        for result in reader.deserialize::<GyroRow>() {
            let row = result.map_err(|e| parse_err(csv_line(&e), e))?;
            ts.push(row.t);
            rs.push(Vec3::new(row.wx, row.wy, row.wz));
        }
        Self::new(ts, rs)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DatasetError> {
        let mut writer = csv::Writer::from_writer(w);
        for (t, r) in self.timestamps.iter().zip(&self.rates) {
            writer
                .serialize(GyroRow { t: *t, wx: r.x, wy: r.y, wz: r.z })
                .map_err(io::Error::from)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Mean squared rate difference between `a(t)` and `b(t + delta)` over
/// their overlap, with the overlap length. `None` when they do not overlap.
fn alignment_cost(a: &GyroSequence, b: &GyroSequence, delta: f64) -> Option<(f64, f64)> {
    let lo = a.start().max(b.start() - delta);
    let hi = a.end().min(b.end() - delta);
    if hi <= lo {
        return None;
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (t, ra) in a.timestamps.iter().zip(&a.rates) {
        if *t < lo || *t > hi {
            continue;
        }
        if let Some(rb) = b.at(t + delta) {
            sum += (ra - rb).norm_squared();
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64, hi - lo))
}

/// Offset `δ` [s] such that `a(t) ≈ b(t + δ)`, searched over
/// `|δ| <= search_window`.
///
/// Candidates are spaced by `a`'s sample period and must overlap for at
/// least half of the shorter sequence's span. The best candidate is refined
/// by fitting a parabola through it and its two neighbors.
pub fn estimate_time_offset(a: &GyroSequence, b: &GyroSequence, search_window: f64) -> Result<f64, DatasetError> {
    if !(search_window >= 0.0 && search_window.is_finite()) {
        return Err(DatasetError::InvalidSequence("search window must be non-negative".into()));
    }
    let step = a.period();
    let k_max = (search_window / step + 1e-9).floor() as i64;
    let required = 0.5 * a.span().min(b.span());
    let mut costs: Vec<Option<f64>> = Vec::with_capacity((2 * k_max + 1) as usize);
    let mut best_overlap: f64 = 0.0;
    for k in -k_max..=k_max {
        let cost = alignment_cost(a, b, k as f64 * step).and_then(|(c, overlap)| {
            best_overlap = best_overlap.max(overlap);
            (overlap >= required).then_some(c)
        });
        costs.push(cost);
    }
    let (best, c0) = costs
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| (i, c)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or(DatasetError::InsufficientOverlap {
            overlap: best_overlap,
            required,
        })?;
    let delta = (best as i64 - k_max) as f64 * step;
    let neighbor = |i: Option<usize>| i.and_then(|i| costs.get(i).copied().flatten());
    if let (Some(cm), Some(cp)) = (neighbor(best.checked_sub(1)), neighbor(Some(best + 1))) {
        let curvature = cm - 2.0 * c0 + cp;
        if curvature > 0.0 {
            let shift = 0.5 * (cm - cp) / curvature;
            return Ok(delta + shift.clamp(-0.5, 0.5) * step);
        }
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{NeighborAnnotation, PitchLabel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_annotation(rng: &mut ChaCha8Rng, frame_id: u64) -> AnnotationRecord {
        let n = rng.random_range(0..4);
        let mut f = || rng.random_range(-3.0..3.0);
        let neighbors = (0..n)
            .map(|i| NeighborAnnotation {
                robot_id: format!("cf{}", i + 1),
                rel_position: Vec3::new(f(), f(), f().abs() + 0.1),
                center: ImagePoint::new(f() * 50.0 + 160.0, f() * 50.0 + 160.0),
                bbox: BoundingBox::new(f(), f(), f() + 10.0, f() + 10.0),
            })
            .collect();
        let poses = (0..=n)
            .map(|i| RobotPose {
                robot_id: format!("cf{i}"),
                pose: Pose::new(
                    f() * 0.1,
                    Vec3::new(f(), f(), f()),
                    Rotation::from_euler_angles(f(), f(), f()),
                ),
            })
            .collect();
        AnnotationRecord {
            annotation: FrameAnnotation {
                frame_id,
                timestamp: frame_id as f64 / 6.0 + f() * 1e-7,
                ego_id: "cf0".into(),
                neighbors,
            },
            world_poses: poses,
        }
    }

    fn dataset(frames: Vec<AnnotationRecord>) -> Dataset {
        let track = PoseTrack::new(
            "cf0",
            vec![
                Pose::new(0.0, Vec3::new(0.1, 0.2, 1.0 / 3.0), Rotation::from_euler_angles(0.1, 0.2, 0.3)),
                Pose::new(0.01, Vec3::new(0.2, 0.2, 1.0), Rotation::identity()),
            ],
        )
        .unwrap();
        Dataset {
            camera: CameraModel::mounted(CameraIntrinsics::default(), PitchLabel::Up),
            geometry: RobotGeometry::default(),
            ellipsoid: EllipsoidSpec::default(),
            scenario: None,
            tracks: vec![track],
            frames,
        }
    }

    fn round_trip(ds: &Dataset) -> Dataset {
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, ds).unwrap();
        read_dataset_from(buf.as_slice()).unwrap()
    }

    #[test]
    fn empty_dataset_round_trips() {
        let mut ds = dataset(vec![]);
        ds.tracks.clear();
        assert_eq!(round_trip(&ds), ds);
    }

    #[test]
    fn random_annotations_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames = (0..100).map(|k| random_annotation(&mut rng, k)).collect();
        let mut ds = dataset(frames);
        ds.scenario = Some(ScenarioConfig::new(crate::dynamics::ScenarioKind::Swap, 2, 10.0));
        assert_eq!(round_trip(&ds), ds);
    }

    #[test]
    fn truncated_file_names_record() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = dataset((0..3).map(|k| random_annotation(&mut rng, k)).collect());
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &ds).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // Header, one track, three frames: cut the last frame in half.
        let last_start = text.trim_end().rfind('\n').unwrap() + 1;
        let cut = &text[..last_start + (text.len() - last_start) / 2];
        match read_dataset_from(cut.as_bytes()) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_dataset_from(&b""[..]), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &dataset(vec![])).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("\"schema_version\":1", "\"schema_version\":2", 1);
        assert!(matches!(
            read_dataset_from(text.as_bytes()),
            Err(DatasetError::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn frame_input_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rec = random_annotation(&mut rng, 0);
        let fi = rec.to_frame_input().unwrap();
        assert_eq!(fi.ego.robot_id, "cf0");
        assert_eq!(fi.neighbors.len(), rec.world_poses.len() - 1);
        rec.annotation.ego_id = "nobody".into();
        assert!(matches!(rec.to_frame_input(), Err(DatasetError::MissingEgo { .. })));
    }

    #[test]
    fn label_export() {
        let dir = tempfile::tempdir().unwrap();
        let intr = CameraIntrinsics::default();
        let empty = FrameAnnotation {
            frame_id: 0,
            timestamp: 0.0,
            ego_id: "cf0".into(),
            neighbors: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let two = loop {
            let r = random_annotation(&mut rng, 1).annotation;
            if r.neighbors.len() == 2 {
                break r;
            }
        };
        let path = dir.path().join("labels.ndjson");
        export_labels(&[empty.clone(), two.clone()], &intr, LabelMode::Bbox, &path).unwrap();
        let (mode, recs) = read_labels(&path).unwrap();
        assert_eq!(mode, LabelMode::Bbox);
        match &recs[..] {
            [LabelRecord::Boxes { labels: l0, .. }, LabelRecord::Boxes { labels: l1, .. }] => {
                assert!(l0.is_empty());
                assert_eq!(l1.len(), 2);
                assert_eq!(l1[0].bbox, two.neighbors[0].bbox);
            }
            other => panic!("{other:?}"),
        }

        let one = FrameAnnotation {
            neighbors: vec![NeighborAnnotation {
                robot_id: "cf1".into(),
                rel_position: Vec3::new(0.0, 0.0, 2.0),
                center: ImagePoint::new(160.0, 160.0),
                bbox: BoundingBox::new(150.0, 150.0, 170.0, 170.0),
            }],
            ..empty
        };
        let mode = LabelMode::Grid { rows: 28, cols: 40 };
        export_labels(std::slice::from_ref(&one), &intr, mode, &path).unwrap();
        let (_, recs) = read_labels(&path).unwrap();
        let expected: Vec<_> = encode_grid(&one, &intr, 28, 40).nonzero_cells().collect();
        assert_eq!(expected.len(), 1);
        assert_eq!(recs, vec![LabelRecord::Grid { frame_id: 0, cells: expected }]);
    }

    #[test]
    fn report_round_trip_and_footer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let r = |id, gt, pred| DownwashFrameResult { frame_id: id, gt_downwash: gt, pred_downwash: pred };
        let results = vec![r(0, true, true), r(1, true, false), r(2, false, false)];
        write_report(&path, &results).unwrap();
        assert_eq!(read_report(&path).unwrap(), results);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with("# tp=1 fp=0 fn=1 tn=1 precision=1.0000 recall=0.5000 f1=0.6667\n"));

        write_report(&path, &[]).unwrap();
        assert!(read_report(&path).unwrap().is_empty());
        assert!(std::fs::read_to_string(&path).unwrap().contains("precision=nan recall=nan f1=0.0000"));
    }

    #[test]
    fn pose_log_examples() {
        let csv = "robot_id,t,x,y,z,qw,qx,qy,qz\ncf1,0.0,1,2,3,1,0,0,0\ncf1,0.1,1,2,3,1,0,0,0\n";
        let tracks = ingest_pose_log_from(csv.as_bytes()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].len(), 2);

        let csv = "robot_id,t,x,y,z,qw,qx,qy,qz\n\
                   b,0.2,0,0,0,1,0,0,0\n\
                   a,0.1,1,0,0,1,0,0,0\n\
                   b,0.0,0,0,0,1,0,0,0\n\
                   a,0.0,0,0,0,1,0,0,0\n";
        let tracks = ingest_pose_log_from(csv.as_bytes()).unwrap();
        assert_eq!(tracks.iter().map(|t| t.robot_id()).collect::<Vec<_>>(), ["a", "b"]);
        let ts: Vec<f64> = tracks[1].samples().iter().map(|s| s.timestamp).collect();
        assert_eq!(ts, [0.0, 0.2]);
        assert_eq!(tracks[0].samples()[1].position(), Vec3::new(1.0, 0.0, 0.0));

        let csv = "robot_id,t,x,y,z,qw,qx,qy,qz\na,0,0,0,0,0,0,0,0\na,1,0,0,0,1,0,0,0\n";
        assert!(matches!(
            ingest_pose_log_from(csv.as_bytes()),
            Err(DatasetError::NonFiniteValue { line: 2, .. })
        ));
        let csv = "robot_id,t,x,y,z,qw,qx,qy,qz\na,0,NaN,0,0,1,0,0,0\n";
        assert!(matches!(ingest_pose_log_from(csv.as_bytes()), Err(DatasetError::NonFiniteValue { .. })));
        let csv = "robot_id,t,x,y,z,qw,qx,qy,qz\na,0,zero,0,0,1,0,0,0\n";
        assert!(matches!(ingest_pose_log_from(csv.as_bytes()), Err(DatasetError::Parse { line: 2, .. })));
    }

    #[test]
    fn unnormalized_quaternion_is_normalized() {
        let csv = "robot_id,t,x,y,z,qw,qx,qy,qz\na,0,0,0,0,2,0,0,0\na,1,0,0,0,0.9,0,0,0.1\n";
        let tracks = ingest_pose_log_from(csv.as_bytes()).unwrap();
        for s in tracks[0].samples() {
            assert!((s.rotation().quaternion().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_log_round_trip() {
        let ds = dataset(vec![]);
        let mut buf = Vec::new();
        write_pose_log_to(&mut buf, &ds.tracks).unwrap();
        assert_eq!(ingest_pose_log_from(buf.as_slice()).unwrap(), ds.tracks);
    }

    fn signal(t: f64) -> Vec3 {
        Vec3::new(
            (7.0 * t).sin() + 0.5 * (23.0 * t).cos(),
            (3.0 * t).cos(),
            0.3 * (11.0 * t + 0.4).sin(),
        )
    }

    #[test]
    fn identical_sequences_have_zero_offset() {
        let a = GyroSequence::sampled(0.0, 1e-3, 2000, signal).unwrap();
        assert!(estimate_time_offset(&a, &a, 0.1).unwrap().abs() < 1e-6);
    }

    #[test]
    fn recovers_ten_millisecond_shift() {
        let a = GyroSequence::sampled(0.0, 1e-3, 3000, signal).unwrap();
        let b = GyroSequence::sampled(0.0, 1e-3, 3000, |t| signal(t - 0.010)).unwrap();
        let d = estimate_time_offset(&a, &b, 0.1).unwrap();
        assert!((d - 0.010).abs() < 1e-3, "{d}");
    }

    #[test]
    fn disjoint_sequences_fail() {
        let a = GyroSequence::sampled(0.0, 1e-3, 1000, signal).unwrap();
        let b = GyroSequence::sampled(5.0, 1e-3, 1000, signal).unwrap();
        assert!(matches!(
            estimate_time_offset(&a, &b, 0.1),
            Err(DatasetError::InsufficientOverlap { .. })
        ));
    }

    #[test]
    fn gyro_validation_and_csv() {
        assert!(GyroSequence::new(vec![0.0, 0.0], vec![Vec3::zeros(); 2]).is_err());
        assert!(GyroSequence::new(vec![0.0], vec![Vec3::zeros()]).is_err());
        assert!(GyroSequence::new(vec![0.0, 1.0], vec![Vec3::zeros()]).is_err());
        let a = GyroSequence::sampled(0.25, 1e-3, 50, signal).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"t,wx,wy,wz\n"));
        assert_eq!(GyroSequence::read_csv(buf.as_slice()).unwrap(), a);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn offset_is_antisymmetric(shift in -0.05f64..0.05) {
            let a = GyroSequence::sampled(0.0, 1e-3, 1500, signal).unwrap();
            let b = GyroSequence::sampled(0.0, 1e-3, 1500, |t| signal(t - shift)).unwrap();
            let ab = estimate_time_offset(&a, &b, 0.08).unwrap();
            let ba = estimate_time_offset(&b, &a, 0.08).unwrap();
            prop_assert!((ab + ba).abs() <= 1e-3);
            prop_assert!((ab - shift).abs() <= 1e-3);
        }

        #[test]
        fn pose_log_is_exact(vals in prop::collection::vec(-10.0f64..10.0, 7)) {
            let rot = Rotation::from_euler_angles(vals[3], vals[4], vals[5]);
            let track = PoseTrack::new(
                "r",
                vec![
                    Pose::new(0.0, Vec3::new(vals[0], vals[1], vals[2]), rot),
                    Pose::new(vals[6].abs() + 0.001, Vec3::zeros(), rot),
                ],
            ).unwrap();
            let mut buf = Vec::new();
            write_pose_log_to(&mut buf, std::slice::from_ref(&track)).unwrap();
            let back = ingest_pose_log_from(buf.as_slice()).unwrap();
            for (x, y) in back[0].samples().iter().zip(track.samples()) {
                prop_assert_eq!(x.timestamp, y.timestamp);
                prop_assert_eq!(x.position(), y.position());
                let (qa, qb) = (x.rotation().into_inner().coords, y.rotation().into_inner().coords);
                prop_assert!((qa - qb).norm() < 1e-15);
            }
        }
    }
}
