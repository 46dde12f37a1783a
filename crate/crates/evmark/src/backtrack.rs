//! Two-way tracking verification: replay a window's events in reverse
//! from the forward result and score how far the backward pose lands
//! from where the window began. Consistent tracking returns close to the
//! starting pose; drift or a bad lock shows up as a discrepancy.

use crate::events::Event;
use crate::geometry::{euler_zyx, project_point, CameraIntrinsics, GeometryError, MarkerModel, Pose};
use crate::tracker::{Tracker, TrackerConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BacktrackError {
    #[error("invalid backtrack config: {0}")]
    Config(&'static str),
    #[error("marker center does not project: {0}")]
    Projection(#[from] GeometryError),
}

/// Which pose the backward result is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyReference {
    /// Compare against the window's starting pose: the backward replay
    /// should return to where the forward pass began.
    #[default]
    WindowStart,
    /// Compare against the forward end pose itself.
    ForwardPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktrackConfig {
    /// Pose updates per verification window.
    pub window_updates: u32,
    /// Translation discrepancy threshold, pixels.
    pub eps_t: f64,
    /// Rotation discrepancy threshold, radians.
    pub eps_r: f64,
    /// Number of initial windows whose discrepancy is ignored while the
    /// initial guess is still being refined.
    pub warmup_windows: u32,
    pub reference: DiscrepancyReference,
}

impl Default for BacktrackConfig {
    fn default() -> Self {
        Self {
            window_updates: 100,
            eps_t: 5.0,
            eps_r: 0.15,
            warmup_windows: 1,
            reference: DiscrepancyReference::default(),
        }
    }
}

impl BacktrackConfig {
    pub fn validate(&self) -> Result<(), BacktrackError> {
        if self.window_updates < 1 {
            return Err(BacktrackError::Config("window_updates must be at least 1"));
        }
        if !(self.eps_t > 0.0) {
            return Err(BacktrackError::Config("eps_t must be positive"));
        }
        if !(self.eps_r > 0.0) {
            return Err(BacktrackError::Config("eps_r must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BacktrackReport {
    pub window_start_t: u64,
    pub window_end_t: u64,
    pub pose_start: Pose,
    pub pose_forward: Pose,
    pub pose_backward: Pose,
    /// Translation discrepancy: L1 pixel distance between the projected
    /// marker centers.
    pub d_t: f64,
    /// Rotation discrepancy: summed absolute differences of the Euler
    /// angles, radians.
    pub d_r: f64,
    pub lost: bool,
}

/// Wrap an angle difference into (-pi, pi].
fn wrap_angle(d: f64) -> f64 {
    let w = d.rem_euclid(std::f64::consts::TAU);
    if w > std::f64::consts::PI {
        w - std::f64::consts::TAU
    } else {
        w
    }
}

/// L1 pixel distance between the projections of the marker center under
/// two poses. The marker center is the model origin.
pub fn translation_discrepancy(
    pose_a: &Pose,
    pose_b: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<f64, BacktrackError> {
    let center = nalgebra::Vector3::zeros();
    let a = project_point(pose_a, intrinsics, &center)?;
    let b = project_point(pose_b, intrinsics, &center)?;
    Ok((a.x - b.x).abs() + (a.y - b.y).abs())
}

/// Summed absolute Euler angle differences (intrinsic Z-Y-X), each
/// wrapped to (-pi, pi].
pub fn rotation_discrepancy(pose_a: &Pose, pose_b: &Pose) -> f64 {
    let (ra, pa, ya) = euler_zyx(&pose_a.rotation);
    let (rb, pb, yb) = euler_zyx(&pose_b.rotation);
    wrap_angle(ra - rb).abs() + wrap_angle(pa - pb).abs() + wrap_angle(ya - yb).abs()
}

/// The lost decision as a pure function of the discrepancies, the
/// thresholds, and the window's position in the stream.
pub fn is_lost(d_t: f64, d_r: f64, cfg: &BacktrackConfig, window_index: u64) -> bool {
    window_index >= u64::from(cfg.warmup_windows) && (d_t > cfg.eps_t || d_r > cfg.eps_r)
}

/// Verify one window: start a fresh tracker (fresh accumulators) at the
/// forward result and feed the window's matched events in reverse order.
/// `events` must be exactly the events the forward tracker consumed over
/// the window, in forward order; `window_index` counts windows from zero
/// for the warm-up rule.
///
/// A backward pose that no longer projects scores an infinite `d_t`, so
/// it trips the threshold as soon as the warm-up ends.
#[allow(clippy::too_many_arguments)]
pub fn backtrack_window(
    pose_start: &Pose,
    pose_forward: &Pose,
    events: &[Event],
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
    tracker_cfg: &TrackerConfig,
    cfg: &BacktrackConfig,
    window_index: u64,
) -> BacktrackReport {
    if events.is_empty() {
        return BacktrackReport {
            window_start_t: 0,
            window_end_t: 0,
            pose_start: *pose_start,
            pose_forward: *pose_forward,
            pose_backward: *pose_forward,
            d_t: 0.0,
            d_r: 0.0,
            lost: false,
        };
    }
    let window_start_t = events.first().map(|e| e.t).unwrap_or_default();
    let window_end_t = events.last().map(|e| e.t).unwrap_or_default();
    let pose_backward = match Tracker::new(
        model.clone(),
        *intrinsics,
        *tracker_cfg,
        *pose_forward,
        window_end_t,
    ) {
        Ok(mut tracker) => {
            for e in events.iter().rev() {
                tracker.process_event(e);
            }
            *tracker.pose()
        }
        // A forward pose behind the camera cannot seed a replay; keep it
        // and let the discrepancy projection flag the window.
        Err(_) => *pose_forward,
    };
    let reference = match cfg.reference {
        DiscrepancyReference::WindowStart => pose_start,
        DiscrepancyReference::ForwardPose => pose_forward,
    };
    let d_t = translation_discrepancy(&pose_backward, reference, intrinsics)
        .unwrap_or(f64::INFINITY);
    let d_r = rotation_discrepancy(&pose_backward, reference);
    BacktrackReport {
        window_start_t,
        window_end_t,
        pose_start: *pose_start,
        pose_forward: *pose_forward,
        pose_backward,
        d_t,
        d_r,
        lost: is_lost(d_t, d_r, cfg, window_index),
    }
}

/// Forward-track events until `cfg.window_updates` pose updates have been
/// applied, recording the matched events, then verify that window.
/// Convenience wrapper used by tests and examples; the pipeline runs the
/// same bookkeeping incrementally. Returns the report plus the number of
/// events consumed from `events`.
#[allow(clippy::too_many_arguments)]
pub fn track_and_verify_window(
    tracker: &mut Tracker,
    events: &[Event],
    cfg: &BacktrackConfig,
    window_index: u64,
) -> (BacktrackReport, usize) {
    let pose_start = *tracker.pose();
    let mut window_events = Vec::new();
    let mut consumed = 0usize;
    let mut updates = 0u32;
    for e in events {
        consumed += 1;
        let step = tracker.process_event(e);
        if step.matched {
            window_events.push(*e);
        }
        if step.update.is_some() {
            updates += 1;
            if updates >= cfg.window_updates {
                break;
            }
        }
    }
    let report = backtrack_window(
        &pose_start,
        tracker.pose(),
        &window_events,
        &tracker.model().clone(),
        &tracker.intrinsics().clone(),
        &tracker.config().clone(),
        cfg,
        window_index,
    );
    (report, consumed)
}
