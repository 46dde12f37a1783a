//! Throughput and latency harnesses.
//!
//! Throughput: fold one recorded stream through a bare tracker at several
//! update cadences and time it, to expose the cost/update-rate trade-off.
//! Latency: replay a stream through the concurrent pipeline behind a
//! synthetic arrival clock and measure pose-emission delay per update.

use std::time::Instant;

use serde::Serialize;

use crate::detector::Dictionary;
use crate::events::Event;
use crate::geometry::{CameraIntrinsics, MarkerModel, Pose};
use crate::sim::Trajectory;
use crate::tracker::{PoseSample, Tracker, TrackerConfig};

use super::{run_concurrent, Pacer, PipelineConfig, PipelineError, PipelineRun};

/// Event interval between pose re-grounds when a reference trajectory is
/// supplied to [`bench_throughput`].
const REGROUND_EVERY: usize = 1000;

/// One throughput measurement at a fixed update cadence.
#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    /// Matched events per pose update for this run.
    pub update_every_n: u32,
    pub wall_seconds: f64,
    /// Events folded through the tracker.
    pub events: u64,
    pub matched: u64,
    pub updates: u64,
    pub events_per_second: f64,
    /// Pose updates per wall-clock second.
    pub achieved_update_rate_hz: f64,
    /// Event-time span divided by wall time; >= 1 keeps up with the
    /// stream in real time.
    pub realtime_factor: f64,
    pub realtime: bool,
    /// Whether the run was periodically re-grounded on a reference
    /// trajectory.
    pub reference_grounded: bool,
}

/// Time one tracker over `events` for each update cadence in `n_values`.
///
/// Every run starts from a fresh tracker at `initial_pose` so the points
/// differ only in `update_every_n`. A warmup pass runs first so cache and
/// allocator effects do not land on the first measurement.
///
/// When `reference` is given, the pose is reset from it every
/// [`REGROUND_EVERY`] events. Extreme cadences drift off the marker and
/// then match nothing, which silently benchmarks an idle matcher;
/// re-grounding pins every cadence to a comparable matched workload so
/// the points isolate the cost of the update rate itself.
pub fn bench_throughput(
    events: &[Event],
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
    base: &TrackerConfig,
    initial_pose: &Pose,
    n_values: &[u32],
    reference: Option<&Trajectory>,
) -> Result<Vec<BenchPoint>, PipelineError> {
    if events.is_empty() {
        return Err(PipelineError::Config("empty event stream".into()));
    }
    if n_values.is_empty() {
        return Err(PipelineError::Config("no update cadences given".into()));
    }
    let start_t = events[0].t;
    let span_s = (events[events.len() - 1].t - start_t) as f64 * 1e-6;
    let mut samples: Vec<PoseSample> = Vec::new();
    let mut run_one = |n: u32| -> Result<(f64, u64, u64), PipelineError> {
        let mut cfg = *base;
        cfg.update_every_n = n;
        let mut tracker = Tracker::new(model.clone(), *intrinsics, cfg, *initial_pose, start_t)
            .map_err(|e| PipelineError::Config(format!("bench tracker: {e}")))?;
        samples.clear();
        let mut matched = 0;
        let mut updates = 0;
        let started = Instant::now();
        for chunk in events.chunks(REGROUND_EVERY) {
            if let Some(traj) = reference {
                tracker.set_pose(traj.pose_at(chunk[0].t));
            }
            let stats = tracker.process_events_into(chunk, &mut samples);
            matched += stats.matched;
            updates += stats.updates_applied;
        }
        let wall = started.elapsed().as_secs_f64();
        Ok((wall, matched, updates))
    };

    run_one(n_values[0])?; // warmup, not recorded

    let mut points = Vec::with_capacity(n_values.len());
    for &n in n_values {
        if n == 0 {
            return Err(PipelineError::Config("update cadence must be >= 1".into()));
        }
        let (wall, matched, updates) = run_one(n)?;
        let events_per_second = if wall > 0.0 {
            events.len() as f64 / wall
        } else {
            0.0
        };
        let realtime_factor = if wall > 0.0 { span_s / wall } else { 0.0 };
        points.push(BenchPoint {
            update_every_n: n,
            wall_seconds: wall,
            events: events.len() as u64,
            matched,
            updates,
            events_per_second,
            achieved_update_rate_hz: if wall > 0.0 { updates as f64 / wall } else { 0.0 },
            realtime_factor,
            realtime: realtime_factor >= 1.0,
            reference_grounded: reference.is_some(),
        });
    }
    Ok(points)
}

/// Pose-emission latency statistics from a paced replay, milliseconds.
///
/// Latency per pose record is the gap between the synthetic arrival time
/// of the event that triggered the update and the instant the record
/// reached the output stage.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LatencyStats {
    pub samples: u64,
    /// Latency of the first pose record; includes the initial detector
    /// pass and the registration replay, so it is expected to spike.
    pub first_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// Mean over the second half of the samples, after warm-up.
    pub steady_mean_ms: f64,
    /// Arrival rate the pacer enforced.
    pub target_events_per_second: f64,
}

/// Replay `events` through the concurrent pipeline at
/// `target_events_per_second` (<= 0 replays at the stream's natural rate)
/// and measure per-update emission latency.
pub fn measure_latency(
    events: &[Event],
    intrinsics: &CameraIntrinsics,
    dict: &Dictionary,
    cfg: &PipelineConfig,
    target_events_per_second: f64,
) -> Result<(LatencyStats, PipelineRun), PipelineError> {
    if events.len() < 2 {
        return Err(PipelineError::Config(
            "latency replay needs at least two events".into(),
        ));
    }
    let t0 = events[0].t;
    let span_us = events[events.len() - 1].t - t0;
    if span_us == 0 {
        return Err(PipelineError::Config(
            "latency replay needs a nonzero event-time span".into(),
        ));
    }
    let inv_speed = if target_events_per_second > 0.0 {
        (events.len() as f64 * 1e6 / target_events_per_second) / span_us as f64
    } else {
        1.0
    };
    let pacer = Pacer {
        start: Instant::now(),
        t0_us: t0,
        inv_speed,
    };
    let (mut run, raw) = run_concurrent(events, intrinsics, dict, cfg, Some(pacer))?;
    let raw = raw.expect("paced run returns stamps");
    if raw.stamps.is_empty() {
        return Err(PipelineError::Config(
            "latency replay produced no pose records (no marker tracked)".into(),
        ));
    }

    let mut lat_ms: Vec<f64> = raw
        .stamps
        .iter()
        .map(|&(t, emitted)| {
            let arrival = raw.pacer.start + raw.pacer.arrival_offset(t);
            emitted.saturating_duration_since(arrival).as_secs_f64() * 1e3
        })
        .collect();
    let first_ms = lat_ms[0];
    let n = lat_ms.len();
    let mean_ms = lat_ms.iter().sum::<f64>() / n as f64;
    let var = lat_ms.iter().map(|v| (v - mean_ms).powi(2)).sum::<f64>() / n as f64;
    let steady: &[f64] = &lat_ms[n / 2..];
    let steady_mean_ms = steady.iter().sum::<f64>() / steady.len() as f64;
    lat_ms.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
    let p99_idx = ((n as f64 * 0.99).ceil() as usize).clamp(1, n) - 1;
    let stats = LatencyStats {
        samples: n as u64,
        first_ms,
        mean_ms,
        std_ms: var.sqrt(),
        p99_ms: lat_ms[p99_idx],
        max_ms: lat_ms[n - 1],
        steady_mean_ms,
        target_events_per_second: if target_events_per_second > 0.0 {
            target_events_per_second
        } else {
            events.len() as f64 * 1e6 / span_us as f64
        },
    };
    run.metrics.latency = Some(stats.clone());
    Ok((stats, run))
}
