//! Geometry foundation: rigid transforms, pinhole projection, the marker
//! 3D model and line-of-sight machinery shared by all other modules.
//!
//! Conventions used throughout the crate:
//! - camera frame: +X right, +Y down, +Z optical axis (visible points have Z > 0)
//! - pixel coordinates: u along +X, v along +Y, origin at the top-left sensor corner
//! - units: meters, radians, microsecond timestamps

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// Point has non-positive depth in the camera frame.
    #[error("point behind camera: depth {0} <= 0")]
    BehindCamera(f64),
    /// Matrix cannot be projected onto the rotation group.
    #[error("degenerate matrix: rank < 3 (smallest singular value {0:.3e})")]
    Degenerate(f64),
    /// Config file could not be parsed.
    #[error("intrinsics config: {0}")]
    Config(String),
    /// Field values violate an invariant.
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid transform mapping marker-frame points into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Orthonormal rotation, det +1.
    pub rotation: Matrix3<f64>,
    /// Translation in meters.
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Transform a marker-frame point into the camera frame.
    #[inline]
    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Orthonormality residual `max(‖RᵀR − I‖∞, |det R − 1|)`.
    pub fn rotation_residual(&self) -> f64 {
        let rtr = self.rotation.transpose() * self.rotation;
        let mut res: f64 = (self.rotation.determinant() - 1.0).abs();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                res = res.max((rtr[(i, j)] - target).abs());
            }
        }
        res
    }
}

/// Pinhole camera parameters (no distortion model).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsic matrix K.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    /// Parse a plain-text `key = value` config with fields
    /// fx, fy, cx, cy, width, height. `#` starts a comment.
    pub fn from_config_str(text: &str) -> Result<Self, GeometryError> {
        let mut fields = std::collections::HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GeometryError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let value: f64 = value.trim().parse().map_err(|_| {
                GeometryError::Config(format!("line {}: bad number `{}`", lineno + 1, value.trim()))
            })?;
            fields.insert(key.trim().to_string(), value);
        }
        let get = |name: &str| {
            fields
                .get(name)
                .copied()
                .ok_or_else(|| GeometryError::Config(format!("missing field `{name}`")))
        };
        Self::new(
            get("fx")?,
            get("fy")?,
            get("cx")?,
            get("cy")?,
            get("width")? as u32,
            get("height")? as u32,
        )
    }

    pub fn from_config_file(path: &std::path::Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GeometryError::Config(format!("{}: {e}", path.display())))?;
        Self::from_config_str(&text)
    }
}

/// Square binary payload pattern, `n x n` cells (payload only, border excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    n: usize,
    bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(n: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), n * n);
        Self { n, bits }
    }

    /// Payload cells per side.
    pub fn size(&self) -> usize {
        self.n
    }

    /// Cell at `row` (top, -Y side first) and `col` (left, -X side first).
    /// `true` is a white cell.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.n + col]
    }

    /// Rotate the pattern by 90 degrees clockwise (as seen on the image plane).
    pub fn rotated_cw(&self) -> BitGrid {
        let n = self.n;
        let mut bits = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                // (r, c) moves to (c, n-1-r)
                bits[c * n + (n - 1 - r)] = self.get(r, c);
            }
        }
        BitGrid { n, bits }
    }
}

/// Marker 3D model: ID, physical size, the four tracked outer vertices and
/// edge segments, plus the binary payload pattern.
///
/// Marker frame: origin at the marker center, X/Y in the marker plane,
/// Z normal. `side` spans the full printed grid including the one-cell
/// black border; a one-cell white quiet zone lies outside `side`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerModel {
    pub id: u32,
    /// Edge length of the outer black border square, meters.
    pub side: f64,
    /// Four ordered coplanar vertices, counter-clockwise in pixel
    /// coordinates when viewed fronto-parallel.
    pub vertices: [Vector3<f64>; 4],
    pub bit_grid: BitGrid,
}

/// Directed edge segment of the marker outline: `base + alpha * dir`,
/// alpha in [0, 1] spans from vertex `base_index` to the next vertex.
#[derive(Debug, Clone, Copy)]
pub struct ModelSegment {
    pub base_index: usize,
    pub base: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl MarkerModel {
    pub fn new(id: u32, side: f64, bit_grid: BitGrid) -> Self {
        let h = side / 2.0;
        // CCW in pixel algebra under a fronto-parallel pose:
        // (-,-) -> (+,-) -> (+,+) -> (-,+)
        let vertices = [
            Vector3::new(-h, -h, 0.0),
            Vector3::new(h, -h, 0.0),
            Vector3::new(h, h, 0.0),
            Vector3::new(-h, h, 0.0),
        ];
        Self {
            id,
            side,
            vertices,
            bit_grid,
        }
    }

    /// The four outer edges, segment k running from vertex k to vertex k+1.
    pub fn segments(&self) -> [ModelSegment; 4] {
        std::array::from_fn(|k| {
            let j = k;
            let i = (k + 1) % 4;
            ModelSegment {
                base_index: j,
                base: self.vertices[j],
                dir: self.vertices[i] - self.vertices[j],
            }
        })
    }

    /// Width of one grid cell in meters (grid has `payload + 2` cells per side).
    pub fn cell_size(&self) -> f64 {
        self.side / (self.bit_grid.size() + 2) as f64
    }
}

/// Camera-frame ray through a pixel together with its projection matrix.
#[derive(Debug, Clone, Copy)]
pub struct LineOfSight {
    /// Ray direction `K⁻¹ (u, v, 1)ᵀ` (not normalized).
    pub direction: Vector3<f64>,
    /// Rank-1 orthogonal projector onto the ray, `M Mᵀ / MᵀM`.
    pub projector: Matrix3<f64>,
}

/// Project a marker-frame point through the pinhole model.
pub fn project_point(
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    point: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let p = pose.transform(point);
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok(Vector2::new(
        intrinsics.fx * p.x / p.z + intrinsics.cx,
        intrinsics.fy * p.y / p.z + intrinsics.cy,
    ))
}

/// Line of sight through a pixel: direction `K⁻¹ (u, v, 1)ᵀ` and the
/// projector onto that ray.
pub fn line_of_sight(intrinsics: &CameraIntrinsics, pixel: &Vector2<f64>) -> LineOfSight {
    let direction = Vector3::new(
        (pixel.x - intrinsics.cx) / intrinsics.fx,
        (pixel.y - intrinsics.cy) / intrinsics.fy,
        1.0,
    );
    let projector = direction * direction.transpose() / direction.norm_squared();
    LineOfSight {
        direction,
        projector,
    }
}

/// Rodrigues exponential of an axis-angle vector.
///
/// Uses a second-order Taylor expansion of the sin/cos coefficients below
/// 1e-8 radians; below 1e-12 the result is exactly the identity.
pub fn exp_rotation(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    if theta < 1e-12 {
        return Matrix3::identity();
    }
    let k = skew(r);
    let k2 = k * k;
    let (a, b) = if theta < 1e-8 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / (theta * theta),
        )
    };
    Matrix3::identity() + k * a + k2 * b
}

/// Axis-angle logarithm of a rotation matrix, inverse of [`exp_rotation`].
/// Angle is in [0, pi].
pub fn log_rotation(m: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-10 {
        // First order: vee of the skew part.
        return Vector3::new(
            (m[(2, 1)] - m[(1, 2)]) / 2.0,
            (m[(0, 2)] - m[(2, 0)]) / 2.0,
            (m[(1, 0)] - m[(0, 1)]) / 2.0,
        );
    }
    if theta > std::f64::consts::PI - 1e-6 {
        // Near pi the skew part vanishes; recover the axis from the
        // symmetric part R + I = 2(aaᵀ + cos·(I - aaᵀ)) ≈ 2 aaᵀ.
        let b = (m + Matrix3::identity()) / 2.0;
        let mut axis = Vector3::new(b[(0, 0)].sqrt(), b[(1, 1)].sqrt(), b[(2, 2)].sqrt());
        // Fix signs using the largest component as reference.
        let imax = if axis.x >= axis.y && axis.x >= axis.z {
            0
        } else if axis.y >= axis.z {
            1
        } else {
            2
        };
        for i in 0..3 {
            if i != imax && b[(imax, i)] < 0.0 {
                axis[i] = -axis[i];
            }
        }
        if axis.norm() < 1e-12 {
            return Vector3::zeros();
        }
        axis = axis.normalize();
        // Disambiguate the overall sign from the skew part when it is nonzero.
        let vee = Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        );
        if vee.dot(&axis) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    let vee = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    vee * (theta / (2.0 * theta.sin()))
}

/// Geodesic angle between two rotations, radians in [0, pi].
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    log_rotation(&(a.transpose() * b)).norm()
}

/// Project a near-rotation onto the nearest rotation matrix (polar
/// projection via SVD). Errors when the input is rank-deficient.
pub fn reorthonormalize(m: &Matrix3<f64>) -> Result<Matrix3<f64>, GeometryError> {
    let svd = m.svd(true, true);
    let smin = svd.singular_values.min();
    if smin < 1e-8 {
        return Err(GeometryError::Degenerate(smin));
    }
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the weakest direction to land on SO(3) rather than O(3).
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    Ok(r)
}

/// Intrinsic Z-Y-X Euler decomposition: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
/// Returns (roll, pitch, yaw). Near gimbal lock (|pitch| = pi/2) roll is
/// pinned to zero and yaw absorbs the remaining in-plane rotation.
pub fn euler_zyx(m: &Matrix3<f64>) -> (f64, f64, f64) {
    let sp = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if sp.abs() > 1.0 - 1e-9 {
        let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
        return (0.0, pitch, yaw);
    }
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    (roll, pitch, yaw)
}

/// Skew-symmetric cross-product matrix of `v`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Independent straight-line reference: u = K * (R p + T), homogeneous divide.
    fn reference_projection(
        pose: &Pose,
        k: &CameraIntrinsics,
        p: &Vector3<f64>,
    ) -> Option<Vector2<f64>> {
        let km = k.matrix();
        let pc = pose.rotation * p + pose.translation;
        if pc.z <= 0.0 {
            return None;
        }
        let h = km * pc;
        Some(Vector2::new(h.x / h.z, h.y / h.z))
    }

    fn random_rotation(rng: &mut StdRng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-6 {
            Vector3::x()
        } else {
            axis.normalize()
        };
        exp_rotation(&(axis * rng.random_range(0.0..std::f64::consts::PI)))
    }

    #[test]
    fn optical_axis_maps_to_principal_point() {
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0));
        let u = project_point(&pose, &test_intrinsics(), &Vector3::zeros()).unwrap();
        assert_relative_eq!(u.x, 320.0);
        assert_relative_eq!(u.y, 240.0);
    }

    #[test]
    fn offset_point_projects_by_similar_triangles() {
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0));
        let u = project_point(&pose, &test_intrinsics(), &Vector3::new(0.05, 0.0, 0.0)).unwrap();
        assert_relative_eq!(u.x, 370.0);
        assert_relative_eq!(u.y, 240.0);
    }

    #[test]
    fn behind_camera_errors() {
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(
            project_point(&pose, &test_intrinsics(), &Vector3::zeros()),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn projection_matches_independent_reference() {
        let k = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..1000 {
            let pose = Pose::new(
                random_rotation(&mut rng),
                Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.3..2.0),
                ),
            );
            let p = Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                0.0,
            );
            match (project_point(&pose, &k, &p), reference_projection(&pose, &k, &p)) {
                (Ok(a), Some(b)) => {
                    assert_relative_eq!(a.x, b.x, max_relative = 1e-12, epsilon = 1e-9);
                    assert_relative_eq!(a.y, b.y, max_relative = 1e-12, epsilon = 1e-9);
                }
                (Err(_), None) => {}
                (a, b) => panic!("implementations disagree: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn line_of_sight_at_principal_point_is_optical_axis() {
        let los = line_of_sight(&test_intrinsics(), &Vector2::new(320.0, 240.0));
        assert_relative_eq!(los.direction.x, 0.0);
        assert_relative_eq!(los.direction.y, 0.0);
        assert_relative_eq!(los.direction.z, 1.0);
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((los.projector - expected).norm() < 1e-12);
    }

    #[test]
    fn line_of_sight_direction_scales_with_offset() {
        let los = line_of_sight(&test_intrinsics(), &Vector2::new(420.0, 240.0));
        let d = los.direction / los.direction.z;
        assert_relative_eq!(d.x, 0.1, epsilon = 1e-12);
        assert_relative_eq!(d.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn projector_properties_hold_on_random_pixels() {
        let k = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..1000 {
            let u = Vector2::new(rng.random_range(-50.0..700.0), rng.random_range(-50.0..530.0));
            let los = line_of_sight(&k, &u);
            let l = los.projector;
            assert!((l - l.transpose()).norm() < 1e-12, "symmetric");
            assert!((l * l - l).norm() < 1e-12, "idempotent");
            assert!((l.trace() - 1.0).abs() < 1e-12, "trace 1");
            assert!((l * los.direction - los.direction).norm() < 1e-12, "fixes M");
        }
    }

    #[test]
    fn ray_consistency_roundtrip() {
        // project, cast a ray through the result, and check the ray passes
        // within 1e-9 m of the original camera-frame point.
        let k = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..1000 {
            let pose = Pose::new(
                random_rotation(&mut rng),
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(0.3..2.0),
                ),
            );
            let p = Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                0.0,
            );
            let pc = pose.transform(&p);
            if pc.z <= 1e-3 {
                continue;
            }
            let u = project_point(&pose, &k, &p).unwrap();
            let los = line_of_sight(&k, &u);
            let off_ray = pc - los.projector * pc;
            assert!(off_ray.norm() < 1e-9, "off-ray distance {}", off_ray.norm());
        }
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_rotation(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = exp_rotation(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let mapped = r * Vector3::x();
        assert_relative_eq!(mapped.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(mapped.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(mapped.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn exp_inverse_symmetry() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let r = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) * rng.random_range(0.0..std::f64::consts::PI);
            let prod = exp_rotation(&r) * exp_rotation(&(-r));
            assert!((prod - Matrix3::identity()).norm() < 1e-10);
        }
    }

    #[test]
    fn exp_norm_additivity_on_fixed_axis() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..200 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let a = rng.random_range(-1.5..1.5);
            let b = rng.random_range(-1.5..1.5);
            let lhs = exp_rotation(&(axis * a)) * exp_rotation(&(axis * b));
            let rhs = exp_rotation(&(axis * (a + b)));
            assert!((lhs - rhs).norm() < 1e-10);
        }
    }

    #[test]
    fn exp_taylor_branch_is_continuous() {
        // Difference across the branch switch is dominated by the angle
        // step itself (~2e-11), not by a coefficient jump.
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        let below = exp_rotation(&(axis * 0.999e-8));
        let above = exp_rotation(&(axis * 1.001e-8));
        assert!((below - above).norm() < 1e-10);
    }

    #[test]
    fn log_inverts_exp() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..500 {
            let r = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let r = if r.norm() < 1e-9 { Vector3::x() * 0.1 } else { r };
            let r = r.normalize() * rng.random_range(1e-6..3.1);
            let back = log_rotation(&exp_rotation(&r));
            assert!((back - r).norm() < 1e-8, "r={r:?} back={back:?}");
        }
    }

    #[test]
    fn log_handles_angles_near_pi() {
        for axis in [Vector3::x(), Vector3::y(), Vector3::z(), Vector3::new(1.0, 1.0, 1.0).normalize()]
        {
            let r = axis * (std::f64::consts::PI - 1e-9);
            let m = exp_rotation(&r);
            let back = log_rotation(&m);
            // Axis sign is ambiguous exactly at pi; compare as rotations.
            assert!((exp_rotation(&back) - m).norm() < 1e-6);
        }
    }

    #[test]
    fn reorthonormalize_fixes_exact_rotation() {
        let mut rng = StdRng::seed_from_u64(17);
        let r = random_rotation(&mut rng);
        let out = reorthonormalize(&r).unwrap();
        assert!((out - r).norm() < 1e-12);
    }

    #[test]
    fn reorthonormalize_small_perturbation_stays_close() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let mut delta = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    delta[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
            let noisy = r + delta * (1e-4 / delta.norm());
            let out = reorthonormalize(&noisy).unwrap();
            let pose = Pose::new(out, Vector3::zeros());
            assert!(pose.rotation_residual() < 1e-12);
            assert!((out - noisy).norm() < 2e-4);
        }
    }

    #[test]
    fn reorthonormalize_rejects_rank_deficient() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0);
        assert!(matches!(
            reorthonormalize(&m),
            Err(GeometryError::Degenerate(_))
        ));
    }

    #[test]
    fn long_product_drift_harness() {
        // 1e5 small rotation factors, reorthonormalized every 100: the
        // determinant must stay within 1e-9 of one.
        let mut rng = StdRng::seed_from_u64(23);
        let mut r = Matrix3::<f64>::identity();
        for i in 0..100_000 {
            let dr = exp_rotation(&Vector3::new(
                rng.random_range(-1e-3..1e-3),
                rng.random_range(-1e-3..1e-3),
                rng.random_range(-1e-3..1e-3),
            ));
            r = dr * r;
            if (i + 1) % 100 == 0 {
                r = reorthonormalize(&r).unwrap();
            }
        }
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn marker_model_vertices_form_square() {
        let model = MarkerModel::new(0, 0.1, BitGrid::new(4, vec![false; 16]));
        for v in &model.vertices {
            assert_eq!(v.z, 0.0);
            assert_relative_eq!(v.x.abs(), 0.05, epsilon = 1e-15);
            assert_relative_eq!(v.y.abs(), 0.05, epsilon = 1e-15);
        }
        // Each vertex appears in exactly two segments.
        let mut counts = [0usize; 4];
        for seg in model.segments() {
            counts[seg.base_index] += 1;
            counts[(seg.base_index + 1) % 4] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
        // Edge lengths all equal `side`, tolerance 1e-12.
        for seg in model.segments() {
            assert_relative_eq!(seg.dir.norm(), 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn projected_vertex_order_is_ccw_in_pixel_algebra() {
        let model = MarkerModel::new(0, 0.1, BitGrid::new(4, vec![false; 16]));
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.5));
        let k = test_intrinsics();
        let px: Vec<Vector2<f64>> = model
            .vertices
            .iter()
            .map(|v| project_point(&pose, &k, v).unwrap())
            .collect();
        let mut shoelace = 0.0;
        for i in 0..4 {
            let a = px[i];
            let b = px[(i + 1) % 4];
            shoelace += a.x * b.y - b.x * a.y;
        }
        assert!(shoelace > 0.0, "projected vertices must wind CCW, got {shoelace}");
    }

    #[test]
    fn bit_grid_rotation_cycles() {
        let bits: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        let g = BitGrid::new(4, bits);
        let mut r = g.clone();
        for _ in 0..4 {
            r = r.rotated_cw();
        }
        assert_eq!(r, g);
        // One cw turn maps (0, 0) to (0, 3).
        let mut bits = vec![false; 16];
        bits[0] = true;
        let g = BitGrid::new(4, bits);
        assert!(g.rotated_cw().get(0, 3));
    }

    #[test]
    fn euler_zyx_roundtrip_single_axes() {
        let (roll, pitch, yaw) = euler_zyx(&exp_rotation(&(Vector3::z() * 0.4)));
        assert_relative_eq!(yaw, 0.4, epsilon = 1e-12);
        assert_relative_eq!(pitch, 0.0, epsilon = 1e-12);
        assert_relative_eq!(roll, 0.0, epsilon = 1e-12);
        let (roll, pitch, _) = euler_zyx(&exp_rotation(&(Vector3::y() * -0.3)));
        assert_relative_eq!(pitch, -0.3, epsilon = 1e-12);
        assert_relative_eq!(roll, 0.0, epsilon = 1e-12);
        let (roll, _, _) = euler_zyx(&exp_rotation(&(Vector3::x() * 0.2)));
        assert_relative_eq!(roll, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn euler_zyx_recomposes() {
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..500 {
            let r = random_rotation(&mut rng);
            let (roll, pitch, yaw) = euler_zyx(&r);
            let rebuilt = exp_rotation(&(Vector3::z() * yaw))
                * exp_rotation(&(Vector3::y() * pitch))
                * exp_rotation(&(Vector3::x() * roll));
            assert!((rebuilt - r).norm() < 1e-9);
        }
    }

    #[test]
    fn intrinsics_config_roundtrip() {
        let text = "# camera\nfx = 1000.0\nfy= 1000\ncx = 320.0\ncy = 240.0\nwidth = 640\nheight = 480\n";
        let k = CameraIntrinsics::from_config_str(text).unwrap();
        assert_eq!(k, test_intrinsics());
        assert!(CameraIntrinsics::from_config_str("fx = 1000").is_err());
        assert!(CameraIntrinsics::from_config_str("nonsense").is_err());
        assert!(CameraIntrinsics::from_config_str(
            "fx = -1\nfy = 1\ncx = 0\ncy = 0\nwidth = 10\nheight = 10"
        )
        .is_err());
    }
}
