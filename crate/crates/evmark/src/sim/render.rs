//! Marker appearance model and pinhole rasterizer.
//!
//! The scene is a single textured plane (the marker at Z = 0 in its own
//! frame) over a uniform gray background. Intensities are linear in
//! [0, 1]; the event model works on their natural logarithm, so black is
//! kept slightly above zero.

use nalgebra::{Vector2, Vector3};

use crate::events::{Event, EventFrame, Polarity};
use crate::geometry::{CameraIntrinsics, MarkerModel, Pose};

pub const BLACK: f64 = 0.02;
pub const WHITE: f64 = 0.98;
pub const BACKGROUND: f64 = 0.5;

/// Row-major grayscale image with intensities in [0, 1].
#[derive(Debug, Clone)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, fill: f64) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: f64) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    /// Write as binary 8-bit PGM.
    pub fn write_pgm(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)?;
        out.flush()
    }
}

/// Pattern intensity at marker-plane coordinates (meters, marker frame).
///
/// Layout from the center outward: payload cells, one-cell black border,
/// one-cell white quiet zone, then background. Row 0 / col 0 of the bit
/// grid sit on the -Y / -X side.
pub fn marker_intensity(model: &MarkerModel, x: f64, y: f64) -> f64 {
    let n = model.bit_grid.size();
    let grid = n + 2;
    let cell = model.cell_size();
    let half = model.side / 2.0;
    let quiet = half + cell;
    if x.abs() <= half && y.abs() <= half {
        let col = (((x + half) / cell) as usize).min(grid - 1);
        let row = (((y + half) / cell) as usize).min(grid - 1);
        if row == 0 || row == grid - 1 || col == 0 || col == grid - 1 {
            BLACK
        } else if model.bit_grid.get(row - 1, col - 1) {
            WHITE
        } else {
            BLACK
        }
    } else if x.abs() <= quiet && y.abs() <= quiet {
        WHITE
    } else {
        BACKGROUND
    }
}

/// Scene intensity along the ray through image point (u, v).
///
/// Intersects the ray with the marker plane; rays that miss the plane or
/// hit it behind the camera see the background.
pub fn intensity_at(
    pose: &Pose,
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
    u: f64,
    v: f64,
) -> f64 {
    let dir = Vector3::new(
        (u - intrinsics.cx) / intrinsics.fx,
        (v - intrinsics.cy) / intrinsics.fy,
        1.0,
    );
    let normal = pose.rotation.column(2).into_owned();
    let denom = normal.dot(&dir);
    if denom.abs() < 1e-12 {
        return BACKGROUND;
    }
    let lambda = normal.dot(&pose.translation) / denom;
    if lambda <= 0.0 {
        return BACKGROUND;
    }
    let hit = dir * lambda;
    let local = pose.rotation.transpose() * (hit - pose.translation);
    marker_intensity(model, local.x, local.y)
}

/// Supersampled intensity for the pixel centered at (u, v): mean of a
/// 2x2 sample pattern at quarter-pixel offsets.
pub fn pixel_intensity(
    pose: &Pose,
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
    u: f64,
    v: f64,
) -> f64 {
    let mut acc = 0.0;
    for du in [-0.25, 0.25] {
        for dv in [-0.25, 0.25] {
            acc += intensity_at(pose, model, intrinsics, u + du, v + dv);
        }
    }
    acc / 4.0
}

/// Render the full camera view of the marker under the given pose.
pub fn render_frame(pose: &Pose, model: &MarkerModel, intrinsics: &CameraIntrinsics) -> GrayImage {
    let mut image = GrayImage::new(intrinsics.width, intrinsics.height, BACKGROUND);
    let bbox = marker_pixel_bbox(pose, model, intrinsics, 2.0);
    let Some((x0, y0, x1, y1)) = bbox else {
        return image;
    };
    for y in y0..=y1 {
        for x in x0..=x1 {
            image.set(
                x,
                y,
                pixel_intensity(pose, model, intrinsics, x as f64, y as f64),
            );
        }
    }
    image
}

/// Pixel bounding box of the quiet-zone outline under `pose`, expanded by
/// `margin` pixels and clipped to the image; `None` when fully outside.
pub fn marker_pixel_bbox(
    pose: &Pose,
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
    margin: f64,
) -> Option<(u32, u32, u32, u32)> {
    let quiet = model.side / 2.0 + model.cell_size();
    let mut min = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut max = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
        let corner = Vector3::new(sx * quiet, sy * quiet, 0.0);
        let p = crate::geometry::project_point(pose, intrinsics, &corner).ok()?;
        min.x = min.x.min(p.x);
        min.y = min.y.min(p.y);
        max.x = max.x.max(p.x);
        max.y = max.y.max(p.y);
    }
    clip_bbox(min, max, margin, intrinsics)
}

pub(crate) fn clip_bbox(
    min: Vector2<f64>,
    max: Vector2<f64>,
    margin: f64,
    intrinsics: &CameraIntrinsics,
) -> Option<(u32, u32, u32, u32)> {
    let x0 = (min.x - margin).floor().max(0.0);
    let y0 = (min.y - margin).floor().max(0.0);
    let x1 = (max.x + margin).ceil().min(intrinsics.width as f64 - 1.0);
    let y1 = (max.y + margin).ceil().min(intrinsics.height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

/// Event frame left by a turn-on burst: each pixel whose log intensity
/// differs from the background by at least `contrast_threshold` holds the
/// polarity of that difference. Matches what `generate_events` produces
/// for a static pose with a background initial reference.
pub fn render_event_frame(
    pose: &Pose,
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
    contrast_threshold: f64,
) -> EventFrame {
    let mut frame = EventFrame::new(intrinsics.width, intrinsics.height);
    let Some((x0, y0, x1, y1)) = marker_pixel_bbox(pose, model, intrinsics, 2.0) else {
        return frame;
    };
    let ref_log = BACKGROUND.ln();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let value = pixel_intensity(pose, model, intrinsics, x as f64, y as f64);
            let delta = value.ln() - ref_log;
            if delta.abs() >= contrast_threshold {
                let polarity = if delta > 0.0 { Polarity::Up } else { Polarity::Down };
                frame
                    .apply_event(&Event::new(0, x as u16, y as u16, polarity))
                    .expect("bbox is clipped to the frame");
            }
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BitGrid;
    use nalgebra::Matrix3;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn checker_model() -> MarkerModel {
        // Alternating payload: bit (r, c) set when r + c is even.
        let bits = (0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect();
        MarkerModel::new(7, 0.1, BitGrid::new(4, bits))
    }

    fn frontal_pose(z: f64) -> Pose {
        Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, z))
    }

    #[test]
    fn pattern_regions_have_expected_intensities() {
        let model = checker_model();
        let cell = model.cell_size();
        // Border cell, quiet zone, background.
        assert_eq!(marker_intensity(&model, 0.045, 0.0), BLACK);
        assert_eq!(marker_intensity(&model, 0.05 + cell / 2.0, 0.0), WHITE);
        assert_eq!(marker_intensity(&model, 0.2, 0.0), BACKGROUND);
        // Payload cell centers: row 0 col 0 is set (white), row 0 col 1 is
        // not. Payload cell (r, c) center sits at ((c - 1.5) cell, (r - 1.5) cell).
        assert_eq!(marker_intensity(&model, -1.5 * cell, -1.5 * cell), WHITE);
        assert_eq!(marker_intensity(&model, -0.5 * cell, -1.5 * cell), BLACK);
    }

    #[test]
    fn frontal_render_places_marker_at_projected_scale() {
        let model = checker_model();
        let intrinsics = test_intrinsics();
        let image = render_frame(&frontal_pose(1.0), &model, &intrinsics);
        // Side 0.1 m at z = 1 with f = 1000 spans 100 px: border at
        // x in [270, 370], quiet zone one cell (16.7 px) beyond.
        assert_eq!(image.get(275, 240), BLACK);
        assert_eq!(image.get(378, 240), WHITE);
        assert_eq!(image.get(500, 240), BACKGROUND);
        assert_eq!(image.get(320, 100), BACKGROUND);
    }

    #[test]
    fn render_bit_orientation_row_zero_is_top() {
        let model = checker_model();
        let intrinsics = test_intrinsics();
        let image = render_frame(&frontal_pose(1.0), &model, &intrinsics);
        let cell_px: f64 = 100.0 / 6.0;
        // Payload (0, 0) center: (-1.5 cell, -1.5 cell) -> up-left of center.
        let u = (320.0 - 1.5 * cell_px).round() as u32;
        let v = (240.0 - 1.5 * cell_px).round() as u32;
        assert_eq!(image.get(u, v), WHITE);
        // Payload (0, 1) is unset.
        let u2 = (320.0 - 0.5 * cell_px).round() as u32;
        assert_eq!(image.get(u2, v), BLACK);
    }

    #[test]
    fn supersampling_smooths_region_boundaries() {
        let model = checker_model();
        let intrinsics = test_intrinsics();
        // Border-to-quiet-zone edge lands at x = 370.0; the pixel there
        // straddles black and white.
        let v = pixel_intensity(&frontal_pose(1.0), &model, &intrinsics, 370.0, 240.0);
        assert!(v > BLACK && v < WHITE, "edge pixel should be mixed, got {v}");
    }

    #[test]
    fn marker_behind_camera_renders_background_only() {
        let model = checker_model();
        let intrinsics = test_intrinsics();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -1.0));
        let image = render_frame(&pose, &model, &intrinsics);
        assert!(image.data.iter().all(|&p| p == BACKGROUND));
    }

    #[test]
    fn marker_outside_frame_renders_background_only() {
        let model = checker_model();
        let intrinsics = test_intrinsics();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 1.0));
        let image = render_frame(&pose, &model, &intrinsics);
        assert!(image.data.iter().all(|&p| p == BACKGROUND));
    }

    #[test]
    fn tilted_pose_keeps_pattern_lookup_consistent() {
        let model = checker_model();
        let intrinsics = test_intrinsics();
        let rot = crate::geometry::exp_rotation(&Vector3::new(0.4, -0.3, 0.2));
        let pose = Pose::new(rot, Vector3::new(0.02, -0.01, 0.8));
        // Project a known-white payload center and sample the rendered
        // image there.
        let cell = model.cell_size();
        let white_center = Vector3::new(-1.5 * cell, -1.5 * cell, 0.0);
        let p = crate::geometry::project_point(&pose, &intrinsics, &white_center).unwrap();
        let image = render_frame(&pose, &model, &intrinsics);
        assert_eq!(image.get(p.x.round() as u32, p.y.round() as u32), WHITE);
    }

    #[test]
    fn event_frame_burst_matches_pattern_polarity() {
        let model = checker_model();
        let intrinsics = test_intrinsics();
        let frame = render_event_frame(&frontal_pose(1.0), &model, &intrinsics, 0.2);
        // Border ring is darker than background, quiet zone brighter, far
        // background silent.
        assert_eq!(frame.sign(275, 240), -1);
        assert_eq!(frame.sign(378, 240), 1);
        assert_eq!(frame.sign(500, 240), 0);
    }

    #[test]
    fn pgm_write_produces_valid_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.pgm");
        let image = GrayImage::new(4, 2, 0.5);
        image.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n4 2\n255\n".len() + 8);
    }
}
