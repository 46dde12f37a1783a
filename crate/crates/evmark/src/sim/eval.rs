//! Tracking accuracy evaluation against ground truth.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::rotation_angle;

use super::{interpolate_pose, TimedPose};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pose series is empty")]
    Empty,
    #[error("ground-truth timestamps must be non-decreasing")]
    TruthOrder,
    #[error("estimates and ground truth do not overlap in time")]
    NoOverlap,
}

/// Pose error statistics with ground truth linearly interpolated to the
/// estimate timestamps.
#[derive(Debug, Clone, Serialize)]
pub struct TrackingErrorReport {
    /// Estimates that fell inside the ground-truth time range.
    pub samples: usize,
    pub mean_translation_mm: f64,
    pub std_translation_mm: f64,
    pub max_translation_mm: f64,
    pub mean_rotation_rad: f64,
    pub std_rotation_rad: f64,
    pub max_rotation_rad: f64,
    /// Reciprocal of the gap between consecutive estimates, Hz. Skipped
    /// during serialization: one entry per sample.
    #[serde(skip)]
    pub update_rate_hz: Vec<f64>,
    pub mean_update_rate_hz: f64,
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), max)
}

pub fn evaluate_tracking(
    estimates: &[TimedPose],
    truth: &[TimedPose],
) -> Result<TrackingErrorReport, EvalError> {
    if estimates.is_empty() || truth.is_empty() {
        return Err(EvalError::Empty);
    }
    if truth.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(EvalError::TruthOrder);
    }
    let t_min = truth.first().unwrap().t;
    let t_max = truth.last().unwrap().t;

    let mut translation_mm = Vec::new();
    let mut rotation_rad = Vec::new();
    let mut aligned_ts = Vec::new();
    for est in estimates {
        if est.t < t_min || est.t > t_max {
            continue;
        }
        let idx = truth.partition_point(|s| s.t <= est.t);
        let gt = if idx == 0 {
            truth[0].pose
        } else if idx == truth.len() {
            truth[truth.len() - 1].pose
        } else {
            let a = &truth[idx - 1];
            let b = &truth[idx];
            if b.t == a.t {
                a.pose
            } else {
                let s = (est.t - a.t) as f64 / (b.t - a.t) as f64;
                interpolate_pose(&a.pose, &b.pose, s)
            }
        };
        translation_mm.push((est.pose.translation - gt.translation).norm() * 1e3);
        rotation_rad.push(rotation_angle(&est.pose.rotation, &gt.rotation));
        aligned_ts.push(est.t);
    }
    if translation_mm.is_empty() {
        return Err(EvalError::NoOverlap);
    }

    let update_rate_hz: Vec<f64> = aligned_ts
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| 1e6 / (w[1] - w[0]) as f64)
        .collect();
    let mean_update_rate_hz = if aligned_ts.len() > 1 {
        let span = (aligned_ts[aligned_ts.len() - 1] - aligned_ts[0]) as f64;
        if span > 0.0 {
            (aligned_ts.len() - 1) as f64 * 1e6 / span
        } else {
            0.0
        }
    } else {
        0.0
    };

    let (mean_t, std_t, max_t) = stats(&translation_mm);
    let (mean_r, std_r, max_r) = stats(&rotation_rad);
    Ok(TrackingErrorReport {
        samples: translation_mm.len(),
        mean_translation_mm: mean_t,
        std_translation_mm: std_t,
        max_translation_mm: max_t,
        mean_rotation_rad: mean_r,
        std_rotation_rad: std_r,
        max_rotation_rad: max_r,
        update_rate_hz,
        mean_update_rate_hz,
    })
}
