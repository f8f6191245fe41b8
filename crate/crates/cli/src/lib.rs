//! Subcommands of the `spinloc` binary.
//!
//! Every command that produces files writes `manifest.json` into its output
//! directory before anything else. `spinloc replay <manifest>` re-runs the
//! recorded command.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use spinloc_core::datasets::{
    self, AnnotationRecord, Dataset, DatasetError, GyroSequence, LabelMode, SCHEMA_VERSION,
};
use spinloc_core::downwash::{build_frames, evaluate_frames, DownwashFrameResult, EllipsoidSpec, Perception};
use spinloc_core::dynamics::{frame_schedule, generate_scenario, ScenarioConfig};
use spinloc_core::eval::{classification_metrics, ConfusionCounts};
use spinloc_core::geometry::PitchLabel;
use spinloc_core::perception::{DetectorMode, NoiseModel, DEFAULT_GRID_COLS, DEFAULT_GRID_ROWS, DEFAULT_THRESHOLD};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.ndjson";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const LABELS_FILE: &str = "labels.ndjson";
pub const OFFSET_FILE: &str = "offset.json";

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: e.into(),
    }
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_DATA,
        error: e.into(),
    }
}

/// Missing or unreadable inputs are usage errors, malformed contents are
/// data errors.
fn dataset_failure(e: DatasetError) -> Failure {
    match e {
        DatasetError::Io(_) => usage(e),
        other => data(other),
    }
}

#[derive(Debug, Parser)]
#[command(name = "spinloc", version, about = "Spinning-camera relative localization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a scenario and write an annotated dataset.
    Simulate(SimulateArgs),
    /// Predict downwash on a dataset and write a per-frame report.
    DownwashEval(DownwashEvalArgs),
    /// Evaluate downwash over a yaw-rate × camera-pitch matrix.
    Benchmark(BenchmarkArgs),
    /// Estimate the time offset between two gyro logs.
    Timesync(TimesyncArgs),
    /// Export detector training labels from a dataset.
    Labels(LabelsArgs),
    /// Re-run the command recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Scenario config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Box,
    Grid,
}

impl ModeArg {
    fn detector(self) -> DetectorMode {
        match self {
            ModeArg::Box => DetectorMode::Box,
            ModeArg::Grid => DetectorMode::Grid {
                rows: DEFAULT_GRID_ROWS,
                cols: DEFAULT_GRID_COLS,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PerceptionArgs {
    /// Use annotated neighbor positions instead of simulated detections.
    #[arg(long, conflicts_with_all = ["noise", "omnidirectional"])]
    pub oracle: bool,
    /// Use exact positions of all neighbors, ignoring the field of view.
    #[arg(long, conflicts_with = "noise")]
    pub omnidirectional: bool,
    /// Detector noise model (TOML); defaults apply when omitted.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    /// Simulated detector type.
    #[arg(long, value_enum, default_value_t = ModeArg::Box)]
    pub mode: ModeArg,
    /// Confidence threshold of the grid decoder.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Overrides the noise model seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Downwash ellipsoid radii `rx,ry,rz` [m].
    #[arg(long, value_parser = parse_ellipsoid)]
    pub ellipsoid: Option<EllipsoidSpec>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DownwashEvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub perception: PerceptionArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchmarkArgs {
    /// Base scenario config (TOML); yaw rate and pitch are overridden per cell.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 4.0, 6.0, 8.0])]
    pub yaw_rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [PitchLabel::Forward, PitchLabel::Tilt45, PitchLabel::Up])]
    pub pitches: Vec<PitchLabel>,
    /// Scenario seeds per cell, starting at the config seed.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    #[command(flatten)]
    pub perception: PerceptionArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TimesyncArgs {
    /// Reference gyro log (CSV `t,wx,wy,wz`).
    #[arg(long)]
    pub a: PathBuf,
    /// Gyro log whose offset is estimated.
    #[arg(long)]
    pub b: PathBuf,
    /// Largest offset searched [s].
    #[arg(long, default_value_t = 0.1)]
    pub window: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct LabelsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Box)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Output directory; defaults to the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_ellipsoid(s: &str) -> Result<EllipsoidSpec, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [rx, ry, rz] = parts[..] else {
        return Err(format!("expected rx,ry,rz, got {} values", parts.len()));
    };
    let e = EllipsoidSpec::new(rx, ry, rz);
    e.validate().map_err(|e| e.to_string())?;
    Ok(e)
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub schema_version: u32,
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub rng_seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn new(command: &Command) -> Self {
        let (config_path, rng_seed, outputs) = match command {
            Command::Simulate(a) => (Some(a.config.clone()), a.seed, vec![a.out.join(DATASET_FILE)]),
            Command::DownwashEval(a) => (None, a.perception.seed, vec![a.out.join(REPORT_FILE)]),
            Command::Benchmark(a) => (Some(a.config.clone()), a.perception.seed, vec![a.out.join(SUMMARY_FILE)]),
            Command::Timesync(a) => (None, None, vec![a.out.join(OFFSET_FILE)]),
            Command::Labels(a) => (None, None, vec![a.out.join(LABELS_FILE)]),
            Command::Replay(_) => (None, None, Vec::new()),
        };
        Self {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            schema_version: SCHEMA_VERSION,
            command: command.clone(),
            config_path,
            rng_seed,
            outputs,
        }
    }
}

fn prepare_out(out: &Path, command: &Command) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(usage)?;
    let file = fs::File::create(out.join(MANIFEST_FILE))
        .context("writing manifest")
        .map_err(usage)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &RunManifest::new(command))
        .context("writing manifest")
        .map_err(usage)
}

pub fn run(command: &Command) -> Result<(), Failure> {
    match command {
        Command::Simulate(a) => {
            prepare_out(&a.out, command)?;
            cmd_simulate(a)
        }
        Command::DownwashEval(a) => {
            prepare_out(&a.out, command)?;
            cmd_downwash_eval(a)
        }
        Command::Benchmark(a) => {
            prepare_out(&a.out, command)?;
            cmd_benchmark(a)
        }
        Command::Timesync(a) => {
            prepare_out(&a.out, command)?;
            cmd_timesync(a)
        }
        Command::Labels(a) => {
            prepare_out(&a.out, command)?;
            cmd_labels(a)
        }
        Command::Replay(a) => cmd_replay(a),
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = datasets::read_scenario_config(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Generates tracks for a scenario and annotates every camera frame.
pub fn simulate_dataset(cfg: &ScenarioConfig) -> anyhow::Result<Dataset> {
    let tracks = generate_scenario(cfg)?;
    let camera = cfg.camera();
    let geometry = cfg.geometry();
    let frames = build_frames(&tracks, 0, &camera, &geometry, &frame_schedule(cfg))?
        .into_iter()
        .map(|f| {
            let mut world_poses = Vec::with_capacity(f.neighbors.len() + 1);
            world_poses.push(f.ego);
            world_poses.extend(f.neighbors);
            AnnotationRecord {
                annotation: f.annotation,
                world_poses,
            }
        })
        .collect();
    Ok(Dataset {
        camera,
        geometry,
        ellipsoid: cfg.ellipsoid_spec(),
        scenario: Some(cfg.clone()),
        tracks,
        frames,
    })
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config, a.seed)?;
    let ds = simulate_dataset(&cfg).map_err(usage)?;
    let e = ds.ellipsoid;
    let positives = ds
        .frame_inputs()
        .map_err(data)?
        .iter()
        .filter(|f| spinloc_core::downwash::ground_truth_downwash(&f.ego.pose.position(), &f.neighbors, &e))
        .count();
    datasets::write_dataset(&a.out.join(DATASET_FILE), &ds).map_err(usage)?;
    println!(
        "simulated {:?}: {} robots, {} frames, {} downwash frames -> {}",
        cfg.kind,
        ds.tracks.len(),
        ds.frames.len(),
        positives,
        a.out.join(DATASET_FILE).display()
    );
    Ok(())
}

/// Perception and ellipsoid selected by the flags.
pub fn resolve_perception(p: &PerceptionArgs, sphere_radius: f64) -> Result<Perception, Failure> {
    if p.oracle {
        return Ok(Perception::Oracle);
    }
    if p.omnidirectional {
        return Ok(Perception::Omnidirectional);
    }
    let mut noise = match &p.noise {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(usage)?;
            NoiseModel::from_toml(&text).map_err(usage)?
        }
        None => NoiseModel::default(),
    };
    if let Some(seed) = p.seed {
        noise.seed = seed;
    }
    Ok(Perception::Simulated {
        noise,
        mode: p.mode.detector(),
        sphere_radius,
        threshold: p.threshold,
    })
}

fn summary_line(c: &ConfusionCounts) -> String {
    let m = classification_metrics(c);
    format!(
        "tp={} fp={} fn={} tn={} precision={} recall={} f1={}",
        c.true_pos,
        c.false_pos,
        c.false_neg,
        c.true_neg,
        fmt_metric(m.precision),
        fmt_metric(m.recall),
        fmt_metric(m.f1)
    )
}

fn cmd_downwash_eval(a: &DownwashEvalArgs) -> Result<(), Failure> {
    let ds = datasets::read_dataset(&a.dataset)
        .map_err(dataset_failure)
        .map_err(|f| Failure {
            error: f.error.context(format!("reading {}", a.dataset.display())),
            ..f
        })?;
    let perception = resolve_perception(&a.perception, ds.geometry.sphere_radius)?;
    let e = a.perception.ellipsoid.unwrap_or(ds.ellipsoid);
    let frames = ds.frame_inputs().map_err(data)?;
    let results = evaluate_frames(&frames, &ds.camera, &perception, &e).map_err(data)?;
    datasets::write_report(&a.out.join(REPORT_FILE), &results).map_err(usage)?;
    println!(
        "{} frames: {}",
        results.len(),
        summary_line(&ConfusionCounts::from_results(&results))
    );
    Ok(())
}

/// Pooled confusion counts of one benchmark cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub yaw_rate: f64,
    pub pitch: PitchLabel,
    pub frames: usize,
    pub counts: ConfusionCounts,
}

/// Evaluates every `(pitch, yaw_rate)` cell, pooling `repeats` scenario
/// seeds per cell. Rows are ordered by pitch, then yaw rate, as given.
pub fn benchmark_matrix(
    base: &ScenarioConfig,
    yaw_rates: &[f64],
    pitches: &[PitchLabel],
    repeats: u64,
    perception: &Perception,
    ellipsoid: &EllipsoidSpec,
) -> anyhow::Result<Vec<BenchmarkRow>> {
    let cells: Vec<(PitchLabel, f64)> = pitches
        .iter()
        .flat_map(|&p| yaw_rates.iter().map(move |&w| (p, w)))
        .collect();
    cells
        .par_iter()
        .map(|&(pitch, yaw_rate)| {
            let mut counts = ConfusionCounts::default();
            let mut frames = 0;
            for r in 0..repeats.max(1) {
                let cfg = ScenarioConfig {
                    yaw_rate,
                    camera_pitch: pitch,
                    seed: base.seed.wrapping_add(r),
                    ..base.clone()
                };
                let results = evaluate_scenario(&cfg, perception, ellipsoid)?;
                frames += results.len();
                counts.merge(&ConfusionCounts::from_results(&results));
            }
            Ok(BenchmarkRow {
                yaw_rate,
                pitch,
                frames,
                counts,
            })
        })
        .collect()
}

/// Downwash results for a freshly generated scenario.
pub fn evaluate_scenario(
    cfg: &ScenarioConfig,
    perception: &Perception,
    ellipsoid: &EllipsoidSpec,
) -> anyhow::Result<Vec<DownwashFrameResult>> {
    let tracks = generate_scenario(cfg)?;
    let camera = cfg.camera();
    let frames = build_frames(&tracks, 0, &camera, &cfg.geometry(), &frame_schedule(cfg))?;
    Ok(evaluate_frames(&frames, &camera, perception, ellipsoid)?)
}

fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.4}")
    }
}

pub fn write_summary(path: &Path, rows: &[BenchmarkRow]) -> std::io::Result<()> {
    let mut text = String::from("yaw_rate,pitch,frames,tp,fp,fn,tn,precision,recall,f1\n");
    for r in rows {
        let m = classification_metrics(&r.counts);
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.yaw_rate,
            r.pitch,
            r.frames,
            r.counts.true_pos,
            r.counts.false_pos,
            r.counts.false_neg,
            r.counts.true_neg,
            fmt_metric(m.precision),
            fmt_metric(m.recall),
            fmt_metric(m.f1)
        ));
    }
    fs::write(path, text)
}

fn cmd_benchmark(a: &BenchmarkArgs) -> Result<(), Failure> {
    let base = load_config(&a.config, None)?;
    if a.yaw_rates.is_empty() || a.pitches.is_empty() {
        return Err(usage(anyhow::anyhow!("empty benchmark matrix")));
    }
    let perception = resolve_perception(&a.perception, base.sphere_radius)?;
    let e = a.perception.ellipsoid.unwrap_or_else(|| base.ellipsoid_spec());
    let rows = benchmark_matrix(&base, &a.yaw_rates, &a.pitches, a.repeats, &perception, &e).map_err(usage)?;
    write_summary(&a.out.join(SUMMARY_FILE), &rows).map_err(usage)?;
    for r in &rows {
        println!("{:>7} yaw {:>4} rad/s: {}", r.pitch.to_string(), r.yaw_rate, summary_line(&r.counts));
    }
    Ok(())
}

fn read_gyro(path: &Path) -> Result<GyroSequence, Failure> {
    let file = fs::File::open(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    GyroSequence::read_csv(file)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(data)
}

#[derive(Serialize)]
struct OffsetRecord {
    schema_version: u32,
    offset_s: f64,
    window_s: f64,
}

fn cmd_timesync(a: &TimesyncArgs) -> Result<(), Failure> {
    let sa = read_gyro(&a.a)?;
    let sb = read_gyro(&a.b)?;
    let offset = datasets::estimate_time_offset(&sa, &sb, a.window).map_err(data)?;
    let record = OffsetRecord {
        schema_version: SCHEMA_VERSION,
        offset_s: offset,
        window_s: a.window,
    };
    let text = serde_json::to_string(&record).map_err(usage)? + "\n";
    fs::write(a.out.join(OFFSET_FILE), text).map_err(usage)?;
    println!("offset: {:.6} s ({:.3} ms)", offset, offset * 1e3);
    Ok(())
}

fn cmd_labels(a: &LabelsArgs) -> Result<(), Failure> {
    let ds = datasets::read_dataset(&a.dataset).map_err(dataset_failure)?;
    let annotations: Vec<_> = ds.frames.iter().map(|f| f.annotation.clone()).collect();
    let mode = match a.mode {
        ModeArg::Box => LabelMode::Bbox,
        ModeArg::Grid => LabelMode::Grid {
            rows: DEFAULT_GRID_ROWS,
            cols: DEFAULT_GRID_COLS,
        },
    };
    datasets::export_labels(&annotations, &ds.camera.intrinsics, mode, &a.out.join(LABELS_FILE)).map_err(usage)?;
    println!("{} label records -> {}", annotations.len(), a.out.join(LABELS_FILE).display());
    Ok(())
}

/// Points a recorded command at a different output directory.
fn redirect(command: &mut Command, out: PathBuf) {
    match command {
        Command::Simulate(a) => a.out = out,
        Command::DownwashEval(a) => a.out = out,
        Command::Benchmark(a) => a.out = out,
        Command::Timesync(a) => a.out = out,
        Command::Labels(a) => a.out = out,
        Command::Replay(_) => {}
    }
}

fn cmd_replay(a: &ReplayArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.manifest)
        .with_context(|| format!("reading {}", a.manifest.display()))
        .map_err(usage)?;
    let manifest: RunManifest = serde_json::from_str(&text).context("parsing manifest").map_err(usage)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(usage(anyhow::anyhow!(
            "manifest schema version {} is not supported",
            manifest.schema_version
        )));
    }
    let mut command = manifest.command;
    if let Some(out) = &a.out {
        redirect(&mut command, out.clone());
    }
    run(&command)
}
