//! Thin command-line front end over the `evmark` library.
//!
//! Exit codes: 0 success, 1 I/O or configuration error, 2 no marker was
//! ever detected (track mode only).

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use evmark::detector::{detect_markers, Dictionary};
use evmark::events::{read_events, write_events, Event, EventFrame, NoiseFilter};
use evmark::geometry::{CameraIntrinsics, MarkerModel, Pose};
use evmark::pipeline::{
    bench_throughput, measure_latency, output, run_pipeline, PipelineConfig,
};
use evmark::sim::{self, generate_events, TimedPose, Trajectory};

#[derive(Parser)]
#[command(
    name = "evmark",
    version,
    about = "Event-camera fiducial marker detection and kHz-rate 6-DOF tracking"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Track markers through a recorded event stream; writes pose CSV,
    /// backtrack CSV, and metrics JSON into the output directory.
    Track {
        /// Event stream (.csv or .evb).
        events: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Sectioned config document; omitted sections use defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the event stream of a marker following a trajectory.
    Simulate {
        /// Keyframe CSV: t_us,tx,ty,tz,qw,qx,qy,qz.
        trajectory: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Output event stream (.csv or .evb).
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth pose CSV aligned with the simulation steps.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dictionary ID of the simulated marker.
        #[arg(long, default_value_t = 0)]
        marker_id: u32,
    },
    /// One-shot detection on the accumulated frame at a given time.
    Detect {
        events: PathBuf,
        /// Frame time in microseconds: events up to and including this
        /// timestamp contribute.
        #[arg(long)]
        at: u64,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare an estimated pose stream against ground truth.
    Evaluate {
        /// Estimated poses (track-mode pose CSV).
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth poses (simulator truth CSV).
        #[arg(long)]
        truth: PathBuf,
        /// Restrict to one marker ID (default: all rows).
        #[arg(long)]
        marker_id: Option<u32>,
    },
    /// Throughput benchmark: fold one stream through the tracker at
    /// several update cadences and report the trade-off.
    Bench {
        /// Update cadences (matched events per pose update).
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,50,100,500")]
        rates: Vec<u32>,
        /// Recorded stream; a synthetic scene is generated when omitted.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Ground-truth pose CSV for the stream. When present, each run
        /// is periodically re-grounded on it, so every cadence measures a
        /// comparable matched workload. The synthetic scene uses its own
        /// ground truth automatically.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pose-emission latency harness: paced replay through the full
    /// concurrent pipeline.
    Latency {
        /// Recorded stream; a synthetic scene is generated when omitted.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Arrival rate to enforce, events per second (<= 0 replays at
        /// the stream's natural rate).
        #[arg(long, default_value_t = 1_000_000.0)]
        rate: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            _ => {
                let _ = e.print();
                return ExitCode::from(1);
            }
        },
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Print a serialized value to stdout, treating a closed pipe (e.g.
/// `evmark detect ... | head`) as success rather than an error.
fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Box<dyn Error>> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, Box<dyn Error>> {
    match path {
        Some(p) => Ok(PipelineConfig::from_file(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics, Box<dyn Error>> {
    Ok(CameraIntrinsics::from_config_file(path)?)
}

/// Built-in scene for bench/latency when no recording is supplied: a
/// 0.1 m marker that rests briefly, then sweeps diagonally while closing
/// from 0.6 m to 0.5 m. Returns the stream and its ground-truth
/// trajectory.
fn synthetic_scene(
    cfg: &PipelineConfig,
    intrinsics: &CameraIntrinsics,
) -> Result<(Vec<Event>, Trajectory), Box<dyn Error>> {
    let dict = Dictionary::builtin();
    let grid = dict
        .bit_grid(0)
        .ok_or("built-in dictionary has no ID 0")?;
    let model = MarkerModel::new(0, cfg.detector.marker_side, grid);
    let pose = |x: f64, y: f64, z: f64| Pose::new(nalgebra::Matrix3::identity(), nalgebra::Vector3::new(x, y, z));
    let traj = Trajectory::new(vec![
        TimedPose { t: 0, pose: pose(0.0, 0.0, 0.6) },
        TimedPose { t: 80_000, pose: pose(0.0, 0.0, 0.6) },
        TimedPose { t: 800_000, pose: pose(0.06, 0.03, 0.5) },
    ])?;
    let out = generate_events(&traj, &model, intrinsics, &cfg.simulator)?;
    Ok((out.events, Trajectory::new(out.ground_truth)?))
}

fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(1000.0, 1000.0, 320.0, 240.0, 640, 480).expect("valid defaults")
}

/// Events filtered the same way the pipeline's ingest stage would.
fn filtered_frame_at(
    events: &[Event],
    at: u64,
    intrinsics: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> Result<EventFrame, Box<dyn Error>> {
    let mut frame = EventFrame::new(intrinsics.width, intrinsics.height);
    let mut filter = cfg
        .filter
        .enabled
        .then(|| NoiseFilter::new(intrinsics.width, intrinsics.height, cfg.filter.filter_config()));
    for e in events.iter().take_while(|e| e.t <= at) {
        if let Some(f) = filter.as_mut() {
            if !f.filter_event(e)? {
                continue;
            }
        }
        frame.apply_event(e)?;
    }
    Ok(frame)
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn Error>> {
    match cli.cmd {
        Cmd::Track {
            events,
            intrinsics,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let intr = load_intrinsics(&intrinsics)?;
            let stream = read_events(&events)?;
            let dict = Dictionary::builtin();
            let run = run_pipeline(&stream, &intr, &dict, &cfg)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| format!("{}: {e}", out.display()))?;
            output::write_pose_csv(out.join("poses.csv"), &run.poses)?;
            output::write_backtrack_csv(out.join("backtrack.csv"), &run.reports)?;
            output::write_metrics_json(out.join("metrics.json"), &run.metrics)?;
            eprintln!(
                "read {} events, tracked {} marker registration(s), wrote {} pose(s) to {}",
                run.metrics.events_read,
                run.metrics.trackers.len(),
                run.poses.len(),
                out.display()
            );
            if run.metrics.trackers.is_empty() {
                eprintln!("no marker was detected in the stream");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Simulate {
            trajectory,
            intrinsics,
            out,
            truth,
            config,
            marker_id,
        } => {
            let cfg = load_config(&config)?;
            let intr = load_intrinsics(&intrinsics)?;
            let traj = Trajectory::from_csv_file(&trajectory)?;
            let dict = Dictionary::builtin();
            let grid = dict
                .bit_grid(marker_id)
                .ok_or_else(|| format!("dictionary has no marker ID {marker_id}"))?;
            let model = MarkerModel::new(marker_id, cfg.detector.marker_side, grid);
            let sim_out = generate_events(&traj, &model, &intr, &cfg.simulator)?;
            write_events(&sim_out.events, &out)?;
            sim::write_pose_csv(&sim_out.ground_truth, &truth)?;
            eprintln!(
                "simulated {} events over {} us, wrote {} and {}",
                sim_out.events.len(),
                traj.end_t() - traj.start_t(),
                out.display(),
                truth.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Detect {
            events,
            at,
            intrinsics,
            config,
        } => {
            let cfg = load_config(&config)?;
            let intr = load_intrinsics(&intrinsics)?;
            let stream = read_events(&events)?;
            let frame = filtered_frame_at(&stream, at, &intr, &cfg)?;
            let detections = detect_markers(&frame, &Dictionary::builtin(), &intr, &cfg.detector);
            let list: Vec<serde_json::Value> = detections
                .iter()
                .map(|d| {
                    serde_json::json!({
                        "id": d.id,
                        "timestamp_us": d.timestamp,
                        "corners_px": d.corners.iter()
                            .map(|c| [c.x, c.y])
                            .collect::<Vec<_>>(),
                        "translation_m": [
                            d.pose.translation.x,
                            d.pose.translation.y,
                            d.pose.translation.z
                        ],
                        "rotation": (0..3)
                            .map(|i| (0..3).map(|j| d.pose.rotation[(i, j)]).collect::<Vec<_>>())
                            .collect::<Vec<_>>(),
                    })
                })
                .collect();
            print_json(&list)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Evaluate {
            est,
            truth,
            marker_id,
        } => {
            let est_records = output::read_pose_csv(&est)?;
            let estimates: Vec<TimedPose> = est_records
                .iter()
                .filter(|r| marker_id.is_none_or(|id| r.marker_id == id))
                .map(|r| TimedPose {
                    t: r.t,
                    pose: r.pose,
                })
                .collect();
            let truth_records = sim::read_pose_csv(&truth)?;
            let report = sim::evaluate_tracking(&estimates, &truth_records)?;
            print_json(&report)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench {
            rates,
            events,
            truth,
            intrinsics,
            config,
        } => {
            let cfg = load_config(&config)?;
            let intr = match &intrinsics {
                Some(p) => load_intrinsics(p)?,
                None => default_intrinsics(),
            };
            let (stream, reference) = match &events {
                Some(p) => {
                    let reference = match &truth {
                        Some(t) => Some(Trajectory::from_csv_file(t)?),
                        None => None,
                    };
                    (read_events(p)?, reference)
                }
                None => {
                    let (stream, truth) = synthetic_scene(&cfg, &intr)?;
                    (stream, Some(truth))
                }
            };
            let (model, pose) = seed_from_stream(&stream, &intr, &cfg)?;
            let points = bench_throughput(
                &stream,
                &model,
                &intr,
                &cfg.tracker,
                &pose,
                &rates,
                reference.as_ref(),
            )?;
            print_json(&points)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Latency {
            events,
            intrinsics,
            config,
            rate,
        } => {
            let cfg = load_config(&config)?;
            let intr = match &intrinsics {
                Some(p) => load_intrinsics(p)?,
                None => default_intrinsics(),
            };
            let stream = match &events {
                Some(p) => read_events(p)?,
                None => synthetic_scene(&cfg, &intr)?.0,
            };
            let (stats, _run) =
                measure_latency(&stream, &intr, &Dictionary::builtin(), &cfg, rate)?;
            print_json(&stats)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Seed a benchmark tracker by running one detector pass on the frame
/// accumulated over the stream's first detector period.
fn seed_from_stream(
    stream: &[Event],
    intr: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> Result<(MarkerModel, Pose), Box<dyn Error>> {
    if stream.is_empty() {
        return Err("event stream is empty".into());
    }
    let at = stream[0].t + cfg.pipeline.detector_period_us;
    let frame = filtered_frame_at(stream, at, intr, cfg)?;
    let dict = Dictionary::builtin();
    let detections = detect_markers(&frame, &dict, intr, &cfg.detector);
    let det = detections
        .first()
        .ok_or("no marker detected in the stream's first detector period")?;
    let grid = dict
        .bit_grid(det.id)
        .ok_or("detection ID missing from dictionary")?;
    let model = MarkerModel::new(det.id, cfg.detector.marker_side, grid);
    Ok((model, det.pose))
}
