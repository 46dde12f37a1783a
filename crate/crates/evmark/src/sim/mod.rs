//! Synthetic event-camera model: renders marker trajectories through the
//! pinhole model and emits event streams with aligned ground-truth poses.
//!
//! The event model is the standard per-pixel contrast-threshold
//! formulation: a pixel emits one event for every crossing of
//! `contrast_threshold` in log intensity relative to its reference level,
//! with the reference advancing by one threshold per event. Fidelity
//! assumptions: ideal pinhole optics, no refractory period, no hot
//! pixels, background noise injected as spurious events that do not
//! disturb pixel state.

mod eval;
mod generate;
mod render;

pub use eval::{evaluate_tracking, EvalError, TrackingErrorReport};
pub use generate::{generate_events, SimOutput};
pub use render::{render_event_frame, render_frame, GrayImage, BACKGROUND, BLACK, WHITE};

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{exp_rotation, log_rotation, Pose};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("trajectory needs at least one keyframe")]
    Empty,
    #[error("keyframe timestamps must be strictly increasing at index {0}")]
    KeyframeOrder(usize),
    #[error("keyframe {0} has non-positive depth")]
    KeyframeDepth(usize),
    #[error("trajectory file {path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A pose with its sample timestamp (microseconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub t: u64,
    pub pose: Pose,
}

/// Keyframed marker trajectory: linear interpolation in translation,
/// constant-speed geodesic interpolation in rotation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    keyframes: Vec<TimedPose>,
}

impl Trajectory {
    pub fn new(keyframes: Vec<TimedPose>) -> Result<Self, SimError> {
        if keyframes.is_empty() {
            return Err(SimError::Empty);
        }
        for i in 1..keyframes.len() {
            if keyframes[i].t <= keyframes[i - 1].t {
                return Err(SimError::KeyframeOrder(i));
            }
        }
        for (i, kf) in keyframes.iter().enumerate() {
            if kf.pose.translation.z <= 0.0 {
                return Err(SimError::KeyframeDepth(i));
            }
        }
        Ok(Self { keyframes })
    }

    pub fn keyframes(&self) -> &[TimedPose] {
        &self.keyframes
    }

    pub fn start_t(&self) -> u64 {
        self.keyframes.first().unwrap().t
    }

    pub fn end_t(&self) -> u64 {
        self.keyframes.last().unwrap().t
    }

    /// Interpolated pose; clamps outside the keyframe range.
    pub fn pose_at(&self, t: u64) -> Pose {
        let kfs = &self.keyframes;
        if t <= kfs[0].t {
            return kfs[0].pose;
        }
        if t >= kfs[kfs.len() - 1].t {
            return kfs[kfs.len() - 1].pose;
        }
        let idx = kfs.partition_point(|kf| kf.t <= t);
        let a = &kfs[idx - 1];
        let b = &kfs[idx];
        let s = (t - a.t) as f64 / (b.t - a.t) as f64;
        interpolate_pose(&a.pose, &b.pose, s)
    }

    /// Build from CSV keyframe rows `t_us, tx, ty, tz, qw, qx, qy, qz`.
    pub fn from_csv_file(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut keyframes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if lineno == 0 && line.starts_with("t_us") {
                continue;
            }
            let parse = |s: &str| -> Result<f64, SimError> {
                s.trim().parse().map_err(|e| SimError::Parse {
                    path: path.display().to_string(),
                    line: lineno as u64 + 1,
                    message: format!("bad number `{}`: {e}", s.trim()),
                })
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(SimError::Parse {
                    path: path.display().to_string(),
                    line: lineno as u64 + 1,
                    message: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            let t = parse(fields[0])? as u64;
            let tr = Vector3::new(parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                parse(fields[4])?,
                parse(fields[5])?,
                parse(fields[6])?,
                parse(fields[7])?,
            ));
            keyframes.push(TimedPose {
                t,
                pose: Pose::new(q.to_rotation_matrix().into_inner(), tr),
            });
        }
        Trajectory::new(keyframes)
    }
}

/// Interpolate between two poses: linear translation, geodesic rotation.
pub fn interpolate_pose(a: &Pose, b: &Pose, s: f64) -> Pose {
    let translation = a.translation * (1.0 - s) + b.translation * s;
    let rel = log_rotation(&(a.rotation.transpose() * b.rotation));
    let rotation = a.rotation * exp_rotation(&(rel * s));
    Pose::new(rotation, translation)
}

/// Write timed poses as CSV keyframe rows `t_us, tx, ty, tz, qw, qx, qy, qz`.
pub fn write_pose_csv(samples: &[TimedPose], path: &std::path::Path) -> Result<(), SimError> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| SimError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| SimError::Io {
        path: path.display().to_string(),
        source: e,
    };
    writeln!(w, "t_us,tx,ty,tz,qw,qx,qy,qz").map_err(io_err)?;
    for s in samples {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            s.pose.rotation,
        ));
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.t,
            s.pose.translation.x,
            s.pose.translation.y,
            s.pose.translation.z,
            q.w,
            q.i,
            q.j,
            q.k
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read timed poses from the keyframe CSV format.
pub fn read_pose_csv(path: &std::path::Path) -> Result<Vec<TimedPose>, SimError> {
    Ok(Trajectory::from_csv_file(path)?.keyframes.clone())
}

/// How per-pixel reference levels start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialReference {
    /// Reference equals the first rendered frame: a static scene emits no
    /// events.
    FirstFrame,
    /// Reference equals the background level: the first step emits a
    /// turn-on burst painting the marker into the event frame, as if the
    /// sensor started observing an already-present scene.
    Background,
}

/// Event generation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Log-intensity step per event.
    pub contrast_threshold: f64,
    /// Microseconds between render steps.
    pub sim_step: u64,
    /// Background noise events per pixel per second.
    pub noise_rate: f64,
    /// Per-event emission delay, drawn uniformly from
    /// `[0, latency_jitter_us]`. Physical sensors time-stamp otherwise
    /// simultaneous threshold crossings with independent per-pixel
    /// latencies; without this spread, a straight edge aligned with the
    /// pixel grid fires entire rows at one instant, which no real
    /// readout produces.
    pub latency_jitter_us: u64,
    pub seed: u64,
    pub initial_reference: InitialReference,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.2,
            sim_step: 100,
            noise_rate: 0.1,
            latency_jitter_us: 100,
            seed: 0,
            // Background is the useful default: the turn-on burst makes a
            // freshly simulated recording detectable from its first frame
            // even if the marker starts at rest. FirstFrame models a
            // sensor that was already settled on the scene.
            initial_reference: InitialReference::Background,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.contrast_threshold <= 0.0 {
            return Err("contrast_threshold must be > 0".into());
        }
        if self.sim_step == 0 {
            return Err("sim_step must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn pose_z(z: f64) -> Pose {
        Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, z))
    }

    #[test]
    fn trajectory_interpolates_linearly_in_translation() {
        let traj = Trajectory::new(vec![
            TimedPose { t: 0, pose: pose_z(1.0) },
            TimedPose {
                t: 1000,
                pose: Pose::new(Matrix3::identity(), Vector3::new(0.1, 0.0, 1.0)),
            },
        ])
        .unwrap();
        let p = traj.pose_at(250);
        assert!((p.translation.x - 0.025).abs() < 1e-12);
    }

    #[test]
    fn trajectory_rotation_is_constant_speed_geodesic() {
        let r1 = exp_rotation(&Vector3::new(0.0, 0.0, 0.8));
        let traj = Trajectory::new(vec![
            TimedPose { t: 0, pose: pose_z(1.0) },
            TimedPose {
                t: 1000,
                pose: Pose::new(r1, Vector3::new(0.0, 0.0, 1.0)),
            },
        ])
        .unwrap();
        let quarter = traj.pose_at(250);
        let angle = log_rotation(&quarter.rotation).norm();
        assert!((angle - 0.2).abs() < 1e-10);
    }

    #[test]
    fn trajectory_clamps_outside_range() {
        let traj = Trajectory::new(vec![
            TimedPose { t: 100, pose: pose_z(1.0) },
            TimedPose { t: 200, pose: pose_z(2.0) },
        ])
        .unwrap();
        assert_eq!(traj.pose_at(0).translation.z, 1.0);
        assert_eq!(traj.pose_at(999).translation.z, 2.0);
    }

    #[test]
    fn trajectory_rejects_bad_keyframes() {
        assert!(matches!(Trajectory::new(vec![]), Err(SimError::Empty)));
        assert!(matches!(
            Trajectory::new(vec![
                TimedPose { t: 10, pose: pose_z(1.0) },
                TimedPose { t: 10, pose: pose_z(1.0) },
            ]),
            Err(SimError::KeyframeOrder(1))
        ));
        assert!(matches!(
            Trajectory::new(vec![TimedPose { t: 0, pose: pose_z(-1.0) }]),
            Err(SimError::KeyframeDepth(0))
        ));
    }

    #[test]
    fn pose_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let samples = vec![
            TimedPose {
                t: 0,
                pose: Pose::new(
                    exp_rotation(&Vector3::new(0.1, -0.2, 0.3)),
                    Vector3::new(0.01, 0.02, 0.7),
                ),
            },
            TimedPose {
                t: 50_000,
                pose: Pose::new(
                    exp_rotation(&Vector3::new(-0.4, 0.0, 0.1)),
                    Vector3::new(-0.05, 0.0, 1.2),
                ),
            },
        ];
        write_pose_csv(&samples, &path).unwrap();
        let back = read_pose_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.t, b.t);
            assert!((a.pose.rotation - b.pose.rotation).norm() < 1e-12);
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-12);
        }
    }
}
