//! Event-by-event 6-DOF pose refinement against a known marker model.
//!
//! Each incoming event is matched to the nearest projected marker edge in
//! pixel space, lifted to the closest-point pair between the event's line
//! of sight and the matched 3D edge in the camera frame, and folded into
//! exponentially blended accumulators. Every `update_every_n` matched
//! events the accumulated translation system is solved and a
//! torque-derived rotation increment is applied.

use crate::events::Event;
use crate::geometry::{
    exp_rotation, project_point, reorthonormalize, CameraIntrinsics, MarkerModel, Pose,
};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Eigenvalue ratio of `acc_a` above which a pose update is skipped: the
/// recent event geometry is too close to a single pencil of parallel rays
/// to support a stable translation solve.
pub const CONDITION_LIMIT: f64 = 1e8;

/// Relative determinant floor for the closest-point system; below it the
/// event ray and the 3D edge are effectively parallel and the match is
/// dropped.
const PARALLEL_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid tracker config: {0}")]
    Config(&'static str),
    #[error("initial pose places marker vertices behind the camera")]
    BadInitialPose,
}

/// Lever arm used when accumulating the rotation torque.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TorqueLever {
    /// Arm from the marker center to the matched model point; rotation
    /// updates act about the marker origin.
    #[default]
    MarkerArm,
    /// Arm from the camera center to the matched model point.
    CameraArm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Blend weight of the newest event in the accumulators.
    pub w0: f64,
    /// Translation update gain.
    pub lambda_t: f64,
    /// Rotation update gain.
    pub lambda_r: f64,
    /// Matched events per pose update.
    pub update_every_n: u32,
    /// Maximum pixel distance from an event to its matched edge.
    pub match_threshold: f64,
    /// Count unmatched events toward the update counter too. Default
    /// counts matched events only.
    pub count_unmatched: bool,
    pub torque_lever: TorqueLever,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            w0: 0.1,
            lambda_t: 1.4,
            lambda_r: 0.003,
            update_every_n: 100,
            match_threshold: 2.0,
            count_unmatched: false,
            torque_lever: TorqueLever::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(self.w0 > 0.0 && self.w0 <= 1.0) {
            return Err(TrackError::Config("w0 must be in (0, 1]"));
        }
        if !(self.lambda_t > 0.0) {
            return Err(TrackError::Config("lambda_t must be positive"));
        }
        if !(self.lambda_r > 0.0) {
            return Err(TrackError::Config("lambda_r must be positive"));
        }
        if self.update_every_n < 1 {
            return Err(TrackError::Config("update_every_n must be at least 1"));
        }
        if !(self.match_threshold > 0.0) {
            return Err(TrackError::Config("match_threshold must be positive"));
        }
        Ok(())
    }
}

/// Mutable tracking state: current pose estimate plus the blended
/// accumulators and counters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerState {
    pub pose: Pose,
    /// Blended `I - L` projector sum (symmetric positive semi-definite).
    pub acc_a: Matrix3<f64>,
    /// Blended perpendicular residual sum.
    pub acc_b: Vector3<f64>,
    /// Blended torque sum.
    pub acc_torque: Vector3<f64>,
    pub events_since_update: u32,
    pub updates_done: u64,
    pub last_event_t: u64,
}

/// Accepted event-to-edge match.
#[derive(Debug, Clone, Copy)]
pub struct MatchResult {
    pub segment_index: usize,
    /// Pixel distance from the event to the matched segment, clamped to
    /// the segment extent.
    pub distance: f64,
    /// Scale along the line of sight: `f_point = alpha1 * M`.
    pub alpha1: f64,
    /// Scale along the edge direction: `e_point = base + alpha2 * dir`.
    pub alpha2: f64,
    /// Point on the event's line of sight closest to the edge line
    /// (camera frame, meters).
    pub f_point: Vector3<f64>,
    /// Point on the edge's infinite line closest to the line of sight.
    pub e_point: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// Conditioning gate rejected the solve; counter reset, pose kept.
    Skipped,
}

#[derive(Debug, Clone, Copy)]
pub struct StepResult {
    pub matched: bool,
    pub update: Option<UpdateOutcome>,
}

/// Pose estimate emitted by an applied update; `t` is the timestamp of
/// the event that triggered it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t: u64,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProcessStats {
    pub matched: u64,
    pub discarded: u64,
    pub updates_applied: u64,
    pub updates_skipped: u64,
}

impl ProcessStats {
    pub fn merge(&mut self, other: &ProcessStats) {
        self.matched += other.matched;
        self.discarded += other.discarded;
        self.updates_applied += other.updates_applied;
        self.updates_skipped += other.updates_skipped;
    }
}

/// Per-segment projection cache, refreshed after every pose update. The
/// pose is constant between updates, so matching against the cache is
/// exact and keeps the hot loop to a four-segment distance test.
#[derive(Debug, Clone, Copy)]
struct SegmentCache {
    px_base: Vector2<f64>,
    px_dir: Vector2<f64>,
    px_len2: f64,
    cam_base: Vector3<f64>,
    cam_dir: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    model: MarkerModel,
    intrinsics: CameraIntrinsics,
    cfg: TrackerConfig,
    state: TrackerState,
    segments: [SegmentCache; 4],
    /// False when the current pose no longer projects in front of the
    /// camera; every event is discarded until the tracker is replaced.
    projection_ok: bool,
}

fn project_segments(
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
) -> Option<[SegmentCache; 4]> {
    let mut px = [Vector2::zeros(); 4];
    for (i, v) in model.vertices.iter().enumerate() {
        px[i] = project_point(pose, intrinsics, v).ok()?;
    }
    Some(std::array::from_fn(|k| {
        let j = (k + 1) % 4;
        let px_dir = px[j] - px[k];
        SegmentCache {
            px_base: px[k],
            px_dir,
            px_len2: px_dir.norm_squared(),
            cam_base: pose.transform(&model.vertices[k]),
            cam_dir: pose.rotation * (model.vertices[j] - model.vertices[k]),
        }
    }))
}

impl Tracker {
    pub fn new(
        model: MarkerModel,
        intrinsics: CameraIntrinsics,
        cfg: TrackerConfig,
        initial_pose: Pose,
        start_t: u64,
    ) -> Result<Self, TrackError> {
        cfg.validate()?;
        let segments =
            project_segments(&model, &intrinsics, &initial_pose).ok_or(TrackError::BadInitialPose)?;
        Ok(Self {
            model,
            intrinsics,
            cfg,
            state: TrackerState {
                pose: initial_pose,
                acc_a: Matrix3::identity(),
                acc_b: Vector3::zeros(),
                acc_torque: Vector3::zeros(),
                events_since_update: 0,
                updates_done: 0,
                last_event_t: start_t,
            },
            segments,
            projection_ok: true,
        })
    }

    pub fn pose(&self) -> &Pose {
        &self.state.pose
    }

    /// Overwrite the pose estimate and reproject the marker edges, e.g.
    /// to re-ground a benchmark run on a reference timeline. Accumulators
    /// are left alone; their old contents fade on the averaging window's
    /// timescale.
    pub fn set_pose(&mut self, pose: Pose) {
        self.state.pose = pose;
        match project_segments(&self.model, &self.intrinsics, &self.state.pose) {
            Some(segs) => {
                self.segments = segs;
                self.projection_ok = true;
            }
            None => self.projection_ok = false,
        }
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn model(&self) -> &MarkerModel {
        &self.model
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    /// Axis-aligned pixel bounds `(min, max)` of the four projected marker
    /// vertices for the current pose. `None` while the pose projects
    /// invalidly (a vertex at or behind the camera plane), in which case
    /// no event can match either.
    pub fn projected_bounds(&self) -> Option<(Vector2<f64>, Vector2<f64>)> {
        if !self.projection_ok {
            return None;
        }
        let mut min = self.segments[0].px_base;
        let mut max = min;
        for seg in &self.segments[1..] {
            min.x = min.x.min(seg.px_base.x);
            min.y = min.y.min(seg.px_base.y);
            max.x = max.x.max(seg.px_base.x);
            max.y = max.y.max(seg.px_base.y);
        }
        Some((min, max))
    }

    /// Match one event against the projected marker edges. Candidate
    /// selection uses the pixel point-to-segment distance clamped to the
    /// segment extent; ties resolve to the lowest segment index. The
    /// returned closest-point pair solves the unclamped two-line system.
    pub fn match_event(&self, e: &Event) -> Option<MatchResult> {
        if !self.projection_ok {
            return None;
        }
        let u = Vector2::new(f64::from(e.x), f64::from(e.y));
        let mut best: Option<(usize, f64)> = None;
        for (k, seg) in self.segments.iter().enumerate() {
            let rel = u - seg.px_base;
            let t = if seg.px_len2 > 1e-12 {
                (rel.dot(&seg.px_dir) / seg.px_len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = (rel - seg.px_dir * t).norm();
            if d <= self.cfg.match_threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        let (index, distance) = best?;
        let seg = &self.segments[index];

        let m = Vector3::new(
            (u.x - self.intrinsics.cx) / self.intrinsics.fx,
            (u.y - self.intrinsics.cy) / self.intrinsics.fy,
            1.0,
        );
        let mm = m.norm_squared();
        let ss = seg.cam_dir.norm_squared();
        let ms = m.dot(&seg.cam_dir);
        // [ -m'm  m's ] [a1]   [ -v'm ]
        // [ -m's  s's ] [a2] = [ -v's ]
        let det = ms * ms - mm * ss;
        if det.abs() <= PARALLEL_EPS * mm * ss {
            return None;
        }
        let vm = seg.cam_base.dot(&m);
        let vs = seg.cam_base.dot(&seg.cam_dir);
        let alpha1 = (ms * vs - vm * ss) / det;
        let alpha2 = (mm * vs - vm * ms) / det;
        let f_point = m * alpha1;
        if f_point.norm_squared() <= 1e-18 {
            return None;
        }
        Some(MatchResult {
            segment_index: index,
            distance,
            alpha1,
            alpha2,
            f_point,
            e_point: seg.cam_base + seg.cam_dir * alpha2,
        })
    }

    /// Fold an accepted match into the blended accumulators.
    pub fn accumulate(&mut self, m: &MatchResult) {
        let w0 = self.cfg.w0;
        let keep = 1.0 - w0;
        // Rank-1 projector onto the event ray; f_point spans the ray.
        let l = m.f_point * m.f_point.transpose() / m.f_point.norm_squared();
        self.state.acc_a = (Matrix3::identity() - l) * w0 + self.state.acc_a * keep;
        // (L - I) e_point equals f_point - e_point at the optimum.
        let residual = m.f_point - m.e_point;
        self.state.acc_b = residual * w0 + self.state.acc_b * keep;
        let lever = match self.cfg.torque_lever {
            TorqueLever::MarkerArm => m.e_point - self.state.pose.translation,
            TorqueLever::CameraArm => m.e_point,
        };
        self.state.acc_torque = lever.cross(&residual) * w0 + self.state.acc_torque * keep;
        self.state.events_since_update += 1;
    }

    /// Solve the accumulated system and step the pose. Resets the event
    /// counter in all cases; accumulators keep their blended history.
    pub fn apply_update(&mut self) -> UpdateOutcome {
        self.state.events_since_update = 0;
        let eig = self.state.acc_a.symmetric_eigenvalues();
        let lo = eig.min();
        let hi = eig.max();
        if !(lo > 0.0) || hi / lo > CONDITION_LIMIT {
            return UpdateOutcome::Skipped;
        }
        let Some(chol) = self.state.acc_a.cholesky() else {
            return UpdateOutcome::Skipped;
        };
        let delta_t = chol.solve(&self.state.acc_b);
        self.state.pose.translation += delta_t * self.cfg.lambda_t;
        let rot = exp_rotation(&(self.state.acc_torque * self.cfg.lambda_r)) * self.state.pose.rotation;
        self.state.pose.rotation = reorthonormalize(&rot).unwrap_or(rot);
        self.state.updates_done += 1;
        match project_segments(&self.model, &self.intrinsics, &self.state.pose) {
            Some(segs) => {
                self.segments = segs;
                self.projection_ok = true;
            }
            None => self.projection_ok = false,
        }
        UpdateOutcome::Applied
    }

    pub fn process_event(&mut self, e: &Event) -> StepResult {
        self.state.last_event_t = e.t;
        let matched = match self.match_event(e) {
            Some(m) => {
                self.accumulate(&m);
                true
            }
            None => {
                if self.cfg.count_unmatched {
                    self.state.events_since_update += 1;
                }
                false
            }
        };
        let update = if self.state.events_since_update >= self.cfg.update_every_n {
            Some(self.apply_update())
        } else {
            None
        };
        StepResult { matched, update }
    }

    /// Fold a timestamp-ordered batch through the tracker, returning one
    /// pose sample per applied update.
    pub fn process_events(&mut self, events: &[Event]) -> (Vec<PoseSample>, ProcessStats) {
        let mut samples = Vec::new();
        let stats = self.process_events_into(events, &mut samples);
        (samples, stats)
    }

    /// As `process_events`, appending samples to a caller-owned buffer.
    pub fn process_events_into(
        &mut self,
        events: &[Event],
        samples: &mut Vec<PoseSample>,
    ) -> ProcessStats {
        let mut stats = ProcessStats::default();
        for e in events {
            let step = self.process_event(e);
            if step.matched {
                stats.matched += 1;
            } else {
                stats.discarded += 1;
            }
            match step.update {
                Some(UpdateOutcome::Applied) => {
                    stats.updates_applied += 1;
                    samples.push(PoseSample {
                        t: e.t,
                        pose: self.state.pose,
                    });
                }
                Some(UpdateOutcome::Skipped) => stats.updates_skipped += 1,
                None => {}
            }
        }
        stats
    }
}
