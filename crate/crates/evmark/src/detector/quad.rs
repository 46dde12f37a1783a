//! Quad candidate extraction from an event-frame snapshot.
//!
//! The marker's black border is the one structure with a stable polarity
//! signature: covered pixels always enter a dark region on a negative
//! event, and the white quiet zone separates the border ring from any
//! negative-polarity ghost trail the moving marker leaves on vacated
//! background. Extraction therefore runs on the negative-polarity bitmap
//! by default, finds connected components, takes each component's convex
//! hull, and decimates it to 4 corners.
//!
//! Sub-pixel corners come from the border's outer edge: for sample
//! points along each coarse side, the midpoint between the outermost
//! negative pixel and the first positive (quiet-zone) pixel along the
//! outward normal straddles the true edge with zero mean bias. A total
//! least-squares line per side and adjacent-line intersections give the
//! corners.

use nalgebra::Vector2;

use crate::events::EventFrame;

use super::{Binarize, DetectorConfig};

/// Components smaller than this can never decimate to a plausible quad.
const MIN_COMPONENT_PIXELS: usize = 16;
/// Sample points this close to a coarse corner are excluded from side
/// line fits.
const CORNER_EXCLUSION_PX: f64 = 3.0;
/// Minimum edge-midpoint samples for a side fit; below this the coarse
/// side is kept.
const MIN_SIDE_SAMPLES: usize = 6;

#[derive(Debug, Clone)]
pub struct QuadCandidate {
    /// Sub-pixel corners, positive-shoelace order, starting at the
    /// corner nearest the top-left.
    pub corners: [Vector2<f64>; 4],
    pub area: f64,
}

fn occupied(frame: &EventFrame, x: i64, y: i64, binarize: Binarize) -> bool {
    if x < 0 || y < 0 || x >= frame.width() as i64 || y >= frame.height() as i64 {
        return false;
    }
    let sign = frame.sign(x as u32, y as u32);
    match binarize {
        Binarize::DarkOnly => sign == -1,
        Binarize::AnyPolarity => sign != 0,
    }
}

fn sign_at(frame: &EventFrame, x: i64, y: i64) -> i8 {
    if x < 0 || y < 0 || x >= frame.width() as i64 || y >= frame.height() as i64 {
        0
    } else {
        frame.sign(x as u32, y as u32)
    }
}

/// 8-connected components of the occupancy bitmap, larger than
/// `MIN_COMPONENT_PIXELS`.
fn components(frame: &EventFrame, binarize: Binarize) -> Vec<Vec<(u32, u32)>> {
    let width = frame.width() as usize;
    let height = frame.height() as usize;
    let mut visited = vec![false; width * height];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            if visited[idx] || !occupied(frame, x as i64, y as i64, binarize) {
                continue;
            }
            let mut component = Vec::new();
            visited[idx] = true;
            stack.push((x as i64, y as i64));
            while let Some((cx, cy)) = stack.pop() {
                component.push((cx as u32, cy as u32));
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (cx + dx, cy + dy);
                        if !occupied(frame, nx, ny, binarize) {
                            continue;
                        }
                        let nidx = ny as usize * width + nx as usize;
                        if !visited[nidx] {
                            visited[nidx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            if component.len() >= MIN_COMPONENT_PIXELS {
                out.push(component);
            }
        }
    }
    out
}

/// Andrew's monotone chain; returns hull in counter-clockwise order
/// under the positive-shoelace convention.
fn convex_hull(points: &[(u32, u32)]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> =
        points.iter().map(|&(x, y)| Vector2::new(x as f64, y as f64)).collect();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut lower: Vec<Vector2<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn shoelace_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = &poly[i];
        let b = &poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

/// Reduce a convex polygon to 4 vertices by repeatedly dropping the
/// vertex whose removal costs the least area.
fn decimate_to_quad(mut hull: Vec<Vector2<f64>>) -> Option<[Vector2<f64>; 4]> {
    if hull.len() < 4 {
        return None;
    }
    while hull.len() > 4 {
        let n = hull.len();
        let mut best = (f64::INFINITY, 0);
        for i in 0..n {
            let prev = hull[(i + n - 1) % n];
            let v = hull[i];
            let next = hull[(i + 1) % n];
            let tri = ((v.x - prev.x) * (next.y - prev.y)
                - (next.x - prev.x) * (v.y - prev.y))
                .abs();
            if tri < best.0 {
                best = (tri, i);
            }
        }
        hull.remove(best.1);
    }
    Some([hull[0], hull[1], hull[2], hull[3]])
}

/// Cyclic reorder: positive shoelace, starting at the corner nearest the
/// image origin (lexicographic y, then x) for determinism.
fn canonical_cycle(mut corners: [Vector2<f64>; 4]) -> [Vector2<f64>; 4] {
    if shoelace_area(&corners) < 0.0 {
        corners.swap(1, 3);
    }
    let start = (0..4)
        .min_by(|&a, &b| {
            (corners[a].y, corners[a].x)
                .partial_cmp(&(corners[b].y, corners[b].x))
                .unwrap()
        })
        .unwrap();
    [
        corners[start],
        corners[(start + 1) % 4],
        corners[(start + 2) % 4],
        corners[(start + 3) % 4],
    ]
}

fn is_strictly_convex(corners: &[Vector2<f64>; 4]) -> bool {
    for i in 0..4 {
        let a = corners[i];
        let b = corners[(i + 1) % 4];
        let c = corners[(i + 2) % 4];
        let cross = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
        if cross <= 1.0 {
            return false;
        }
    }
    true
}

/// Edge-straddling sample points for one side: midpoints between the
/// outermost negative pixel and the first positive pixel along the
/// outward normal.
fn side_edge_samples(
    frame: &EventFrame,
    a: Vector2<f64>,
    b: Vector2<f64>,
    outward: Vector2<f64>,
) -> Vec<Vector2<f64>> {
    let side = b - a;
    let len = side.norm();
    if len < 2.0 * CORNER_EXCLUSION_PX {
        return Vec::new();
    }
    // Advance the dominant axis of the normal by one pixel per probe step.
    let probe = outward / outward.x.abs().max(outward.y.abs());
    let mut samples = Vec::new();
    let steps = len.floor() as usize;
    for i in 0..=steps {
        let t = i as f64 / steps.max(1) as f64;
        if t * len < CORNER_EXCLUSION_PX || (1.0 - t) * len < CORNER_EXCLUSION_PX {
            continue;
        }
        let q = a + side * t;
        let mut dark: Option<f64> = None;
        let mut up: Option<f64> = None;
        for j in -4..=4 {
            let p = q + probe * j as f64;
            let (px, py) = (p.x.round() as i64, p.y.round() as i64);
            let offset = (Vector2::new(px as f64, py as f64) - q).dot(&outward);
            match sign_at(frame, px, py) {
                -1 => {
                    if up.is_none() && dark.map_or(true, |d| offset > d) {
                        dark = Some(offset);
                    }
                }
                1 => {
                    if dark.is_some() && up.map_or(true, |u| offset < u) {
                        up = Some(offset);
                    }
                }
                _ => {}
            }
        }
        if let (Some(d), Some(u)) = (dark, up) {
            if u > d && u - d <= 2.5 {
                samples.push(q + outward * ((d + u) / 2.0));
            }
        }
    }
    samples
}

/// Total least-squares line through `points`: (centroid, unit direction).
fn fit_line(points: &[Vector2<f64>]) -> (Vector2<f64>, Vector2<f64>) {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector2<f64>>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p - centroid;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    // Principal eigenvector of the 2x2 covariance.
    let trace_half = (sxx + syy) / 2.0;
    let det = sxx * syy - sxy * sxy;
    let lambda = trace_half + (trace_half * trace_half - det).max(0.0).sqrt();
    let dir = if sxy.abs() > 1e-12 {
        Vector2::new(lambda - syy, sxy).normalize()
    } else if sxx >= syy {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    };
    (centroid, dir)
}

fn intersect_lines(
    (p1, d1): (Vector2<f64>, Vector2<f64>),
    (p2, d2): (Vector2<f64>, Vector2<f64>),
) -> Option<Vector2<f64>> {
    let det = d1.x * (-d2.y) - (-d2.x) * d1.y;
    if det.abs() < 1e-9 {
        return None;
    }
    let rhs = p2 - p1;
    let t = (rhs.x * (-d2.y) - (-d2.x) * rhs.y) / det;
    Some(p1 + d1 * t)
}

/// Refine coarse hull corners against the border's outer edge. Sides
/// without enough edge support keep their coarse line; corners that move
/// implausibly far fall back to the coarse estimate.
fn refine_corners(frame: &EventFrame, coarse: &[Vector2<f64>; 4]) -> [Vector2<f64>; 4] {
    let centroid = (coarse[0] + coarse[1] + coarse[2] + coarse[3]) / 4.0;
    let mut lines = [(Vector2::zeros(), Vector2::zeros()); 4];
    let mut fitted = [false; 4];
    for k in 0..4 {
        let a = coarse[k];
        let b = coarse[(k + 1) % 4];
        let side = b - a;
        let mut outward = Vector2::new(side.y, -side.x).normalize();
        if outward.dot(&((a + b) / 2.0 - centroid)) < 0.0 {
            outward = -outward;
        }
        let samples = side_edge_samples(frame, a, b, outward);
        if samples.len() >= MIN_SIDE_SAMPLES {
            lines[k] = fit_line(&samples);
            fitted[k] = true;
        } else {
            lines[k] = (a, side.normalize());
        }
    }
    let mut refined = *coarse;
    for k in 0..4 {
        // Corner k sits between side k-1 and side k. Coarse hull corners
        // sit up to a few pixels inside the true corner when the corner
        // pixels themselves stay silent, so two well-fit lines are
        // trusted further out than a fit against a fallback side.
        let prev = (k + 3) % 4;
        if let Some(p) = intersect_lines(lines[prev], lines[k]) {
            let limit = if fitted[prev] && fitted[k] { 6.0 } else { 3.0 };
            if (p - coarse[k]).norm() <= limit {
                refined[k] = p;
            }
        }
    }
    refined
}

/// Extract quad candidates from a frame snapshot.
pub fn find_quads(frame: &EventFrame, cfg: &DetectorConfig) -> Vec<QuadCandidate> {
    let mut quads = Vec::new();
    for component in components(frame, cfg.binarize) {
        let hull = convex_hull(&component);
        let Some(coarse) = decimate_to_quad(hull) else {
            continue;
        };
        let coarse = canonical_cycle(coarse);
        if !is_strictly_convex(&coarse) {
            continue;
        }
        let corners = canonical_cycle(refine_corners(frame, &coarse));
        let area = shoelace_area(&corners);
        if area < cfg.min_area || !is_strictly_convex(&corners) {
            continue;
        }
        quads.push(QuadCandidate { corners, area });
    }
    quads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_rotation, BitGrid, CameraIntrinsics, MarkerModel, Pose};
    use crate::sim::render_event_frame;
    use nalgebra::{Matrix3, Vector3};

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn checker_model() -> MarkerModel {
        let bits = (0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect();
        MarkerModel::new(7, 0.1, BitGrid::new(4, bits))
    }

    fn corner_error(found: &[Vector2<f64>; 4], expected: &[Vector2<f64>; 4]) -> f64 {
        // Allow any cyclic shift; quad extraction has no payload
        // orientation knowledge.
        (0..4)
            .map(|shift| {
                (0..4)
                    .map(|i| (found[(i + shift) % 4] - expected[i]).norm())
                    .fold(0.0f64, f64::max)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn projected_vertices(pose: &Pose, model: &MarkerModel) -> [Vector2<f64>; 4] {
        let intrinsics = test_intrinsics();
        let mut out = [Vector2::zeros(); 4];
        for (i, v) in model.vertices.iter().enumerate() {
            out[i] = crate::geometry::project_point(pose, &intrinsics, v).unwrap();
        }
        out
    }

    /// Payload cells form their own dark components, so a frame can yield
    /// several candidates; the marker outline is always the largest.
    fn outline_quad(quads: &[QuadCandidate]) -> &QuadCandidate {
        quads
            .iter()
            .max_by(|a, b| a.area.total_cmp(&b.area))
            .expect("no quads found")
    }

    #[test]
    fn frontal_marker_yields_subpixel_outline_quad() {
        let model = checker_model();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.7));
        let frame = render_event_frame(&pose, &model, &test_intrinsics(), 0.2);
        let quads = find_quads(&frame, &DetectorConfig::default());
        assert!(!quads.is_empty());
        let quad = outline_quad(&quads);
        let err = corner_error(&quad.corners, &projected_vertices(&pose, &model));
        assert!(err < 0.3, "corner error {err:.3} px");
    }

    #[test]
    fn tilted_marker_quad_stays_subpixel() {
        let model = checker_model();
        let pose = Pose::new(
            exp_rotation(&Vector3::new(0.45, -0.35, 0.3)),
            Vector3::new(0.03, -0.02, 0.8),
        );
        let frame = render_event_frame(&pose, &model, &test_intrinsics(), 0.2);
        let quads = find_quads(&frame, &DetectorConfig::default());
        assert!(!quads.is_empty());
        let quad = outline_quad(&quads);
        let err = corner_error(&quad.corners, &projected_vertices(&pose, &model));
        assert!(err < 0.5, "corner error {err:.3} px");
    }

    #[test]
    fn blank_frame_has_no_quads() {
        let frame = EventFrame::new(640, 480);
        assert!(find_quads(&frame, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn far_small_marker_is_rejected_by_min_area() {
        let model = checker_model();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 12.0));
        let frame = render_event_frame(&pose, &model, &test_intrinsics(), 0.2);
        // 0.1 m at 12 m spans ~8 px: under the 100 px^2 default gate.
        assert!(find_quads(&frame, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn corners_are_ordered_positive_shoelace_from_top_left() {
        let model = checker_model();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.7));
        let frame = render_event_frame(&pose, &model, &test_intrinsics(), 0.2);
        let quads = find_quads(&frame, &DetectorConfig::default());
        let c = &outline_quad(&quads).corners;
        assert!(shoelace_area(c) > 0.0);
        assert!(c[0].y < c[3].y && c[0].x < c[1].x);
    }

    #[test]
    fn hull_decimation_recovers_square_corners() {
        // Dense axis-aligned square of points plus staircase jitter.
        let mut pts = Vec::new();
        for x in 10..=50 {
            for y in 20..=60 {
                if x == 10 || x == 50 || y == 20 || y == 60 {
                    pts.push((x, y));
                }
            }
        }
        let hull = convex_hull(&pts);
        let quad = decimate_to_quad(hull).unwrap();
        let quad = canonical_cycle(quad);
        assert_eq!(quad[0], Vector2::new(10.0, 20.0));
        assert_eq!(quad[2], Vector2::new(50.0, 60.0));
    }

    #[test]
    fn line_fit_recovers_known_line() {
        let pts: Vec<Vector2<f64>> = (0..50)
            .map(|i| {
                let t = i as f64;
                Vector2::new(3.0 + t * 0.8, 7.0 + t * 0.6)
            })
            .collect();
        let (c, d) = fit_line(&pts);
        assert!((d.x.abs() - 0.8).abs() < 1e-9 && (d.y.abs() - 0.6).abs() < 1e-9);
        let residual = (pts[0] - c).perp(&d);
        assert!(residual.abs() < 1e-9);
    }
}
