//! Frame-based marker detection: quad extraction from an event-frame
//! snapshot, payload decoding against a dictionary, and pose
//! initialization for new trackers.

mod dictionary;
mod homography;
mod pnp;
mod quad;

pub use dictionary::{DictMatch, Dictionary, DictionaryError};
pub use homography::{homography_dlt, pose_from_homography};
pub use pnp::{solve_pnp, PnpResult};
pub use quad::{find_quads, QuadCandidate};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventFrame;
use crate::geometry::{CameraIntrinsics, MarkerModel, Pose};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("reprojection rms {rms_px:.3} px exceeds limit {limit} px")]
    RmsExceeded { rms_px: f64, limit: f64 },
}

/// Which polarity counts as occupied during quad extraction. Negative
/// polarity alone tracks the black border; the quiet zone's positive
/// events would otherwise fuse border, payload and ghost trails into one
/// blob whose hull is the quiet-zone outline, not the border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    DarkOnly,
    AnyPolarity,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Minimum quad area, px^2.
    pub min_area: f64,
    /// Maximum Hamming distance for a dictionary match.
    pub hamming_budget: u32,
    /// Minimum fraction of border cells sampled dark.
    pub border_fraction: f64,
    /// Reprojection gate for the pose initializer, px.
    pub max_rms_px: f64,
    /// Physical edge length of the border square, meters; all dictionary
    /// markers are assumed printed at this size.
    pub marker_side: f64,
    pub binarize: Binarize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            min_area: 100.0,
            hamming_budget: 0,
            border_fraction: 0.7,
            max_rms_px: 2.0,
            marker_side: 0.1,
            binarize: Binarize::DarkOnly,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_area <= 0.0 {
            return Err("min_area must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.border_fraction) {
            return Err("border_fraction must be in [0, 1]".into());
        }
        if self.max_rms_px <= 0.0 {
            return Err("max_rms_px must be > 0".into());
        }
        if self.marker_side <= 0.0 {
            return Err("marker_side must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub id: u32,
    /// Sub-pixel corners reordered so corner i corresponds to model
    /// vertex i of the canonical (rotation-0) marker.
    pub corners: [Vector2<f64>; 4],
    pub pose: Pose,
    /// Timestamp of the frame snapshot, µs.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeResult {
    pub id: u32,
    /// Clockwise quarter-turns of the observed grid relative to the
    /// canonical payload.
    pub rotation: usize,
    pub distance: u32,
}

fn frame_sign(frame: &EventFrame, p: Vector2<f64>) -> i8 {
    let (x, y) = (p.x.round(), p.y.round());
    if x < 0.0 || y < 0.0 || x >= frame.width() as f64 || y >= frame.height() as f64 {
        0
    } else {
        frame.sign(x as u32, y as u32)
    }
}

/// Majority polarity of a cell sampled on a 3x3 grid around its center.
/// `None` when up and down counts tie (including all-silent).
fn sample_cell(
    frame: &EventFrame,
    h: &nalgebra::Matrix3<f64>,
    row: usize,
    col: usize,
) -> Option<bool> {
    let mut up = 0;
    let mut down = 0;
    for dv in [-0.28, 0.0, 0.28] {
        for du in [-0.28, 0.0, 0.28] {
            let g = Vector3::new(col as f64 + 0.5 + du, row as f64 + 0.5 + dv, 1.0);
            let q = h * g;
            let p = Vector2::new(q.x / q.z, q.y / q.z);
            match frame_sign(frame, p) {
                1 => up += 1,
                -1 => down += 1,
                _ => {}
            }
        }
    }
    match up.cmp(&down) {
        std::cmp::Ordering::Greater => Some(true),
        std::cmp::Ordering::Less => Some(false),
        std::cmp::Ordering::Equal => None,
    }
}

/// Decode the payload inside a corner quad. Samples every cell of the
/// bordered grid through the corner homography, gates on the dark border
/// fraction, and matches the payload against the dictionary under 4
/// rotations.
pub fn decode_payload(
    frame: &EventFrame,
    corners: &[Vector2<f64>; 4],
    dict: &Dictionary,
    cfg: &DetectorConfig,
) -> Option<DecodeResult> {
    let n = dict.grid_size();
    let grid = (n + 2) as f64;
    let grid_corners = [
        Vector2::new(0.0, 0.0),
        Vector2::new(grid, 0.0),
        Vector2::new(grid, grid),
        Vector2::new(0.0, grid),
    ];
    let h = homography_dlt(&grid_corners, corners).ok()?;

    let last = n + 1;
    let mut dark_border = 0usize;
    let mut border_total = 0usize;
    for row in 0..=last {
        for col in 0..=last {
            if row != 0 && row != last && col != 0 && col != last {
                continue;
            }
            border_total += 1;
            if sample_cell(frame, &h, row, col) == Some(false) {
                dark_border += 1;
            }
        }
    }
    if (dark_border as f64) < cfg.border_fraction * border_total as f64 {
        return None;
    }

    let mut cells = Vec::with_capacity(n * n);
    for row in 1..=n {
        for col in 1..=n {
            cells.push(sample_cell(frame, &h, row, col));
        }
    }
    let m = dict.identify(&cells, cfg.hamming_budget)?;
    Some(DecodeResult { id: m.id, rotation: m.rotation, distance: m.distance })
}

/// Detect dictionary markers in a frame snapshot. At most one detection
/// per ID; duplicates keep the larger quad.
pub fn detect_markers(
    frame: &EventFrame,
    dict: &Dictionary,
    intrinsics: &CameraIntrinsics,
    cfg: &DetectorConfig,
) -> Vec<Detection> {
    let mut detections: Vec<(Detection, f64)> = Vec::new();
    for quad in find_quads(frame, cfg) {
        let Some(decoded) = decode_payload(frame, &quad.corners, dict, cfg) else {
            continue;
        };
        // The observed grid is the canonical payload rotated `rotation`
        // quarter-turns clockwise, so canonical corner i sits at observed
        // corner (i + rotation) % 4.
        let mut corners = [Vector2::zeros(); 4];
        for (i, c) in corners.iter_mut().enumerate() {
            *c = quad.corners[(i + decoded.rotation) % 4];
        }
        let Some(bit_grid) = dict.bit_grid(decoded.id) else {
            continue;
        };
        let model = MarkerModel::new(decoded.id, cfg.marker_side, bit_grid);
        let Ok(solved) = solve_pnp(&corners, &model, intrinsics, cfg.max_rms_px) else {
            continue;
        };
        let detection = Detection {
            id: decoded.id,
            corners,
            pose: solved.pose,
            timestamp: frame.last_update(),
        };
        match detections.iter_mut().find(|(d, _)| d.id == decoded.id) {
            Some(existing) if existing.1 < quad.area => *existing = (detection, quad.area),
            Some(_) => {}
            None => detections.push((detection, quad.area)),
        }
    }
    detections.into_iter().map(|(d, _)| d).collect()
}
