//! Plane-to-image homography estimation and pose extraction.

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3};

use crate::geometry::{reorthonormalize, CameraIntrinsics, Pose};

use super::DetectError;

/// Isotropic normalization: translate centroid to origin, scale mean
/// distance to sqrt(2).
fn normalization(points: &[Vector2<f64>; 4]) -> Matrix3<f64> {
    let centroid = points.iter().sum::<Vector2<f64>>() / 4.0;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / 4.0;
    let scale = if mean_dist > 1e-12 { 2f64.sqrt() / mean_dist } else { 1.0 };
    Matrix3::new(
        scale,
        0.0,
        -scale * centroid.x,
        0.0,
        scale,
        -scale * centroid.y,
        0.0,
        0.0,
        1.0,
    )
}

fn apply(m: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = m * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Direct linear transform for the homography mapping `src[i]` to
/// `dst[i]` (homogeneous, scale-normalized so h33 is 1 when possible).
pub fn homography_dlt(
    src: &[Vector2<f64>; 4],
    dst: &[Vector2<f64>; 4],
) -> Result<Matrix3<f64>, DetectError> {
    let t_src = normalization(src);
    let t_dst = normalization(dst);
    // Padded with a zero row so the SVD is full-size and exposes the
    // null-space direction as the last right singular vector.
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..4 {
        let s = apply(&t_src, &src[i]);
        let d = apply(&t_dst, &dst[i]);
        let r = 2 * i;
        a[(r, 0)] = -s.x;
        a[(r, 1)] = -s.y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = d.x * s.x;
        a[(r, 7)] = d.x * s.y;
        a[(r, 8)] = d.x;
        a[(r + 1, 3)] = -s.x;
        a[(r + 1, 4)] = -s.y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = d.y * s.x;
        a[(r + 1, 7)] = d.y * s.y;
        a[(r + 1, 8)] = d.y;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    // Singular values are sorted descending: index 8 is the padded zero,
    // index 7 reveals rank deficiency of the 8 real equations.
    let h = v_t.row(8);
    if svd.singular_values[7] < 1e-10 {
        return Err(DetectError::Degenerate("homography correspondences are degenerate".into()));
    }
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let denorm = t_dst.try_inverse().expect("similarity transform invertible") * hn * t_src;
    let scale = denorm[(2, 2)];
    Ok(if scale.abs() > 1e-12 { denorm / scale } else { denorm })
}

/// Pose of the Z = 0 plane from a metric homography (plane meters to
/// pixels): H ~ K [r1 r2 t]. Used as the initializer for the nonlinear
/// refinement.
pub fn pose_from_homography(
    h: &Matrix3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Result<Pose, DetectError> {
    let k_inv = intrinsics
        .matrix()
        .try_inverse()
        .expect("intrinsics matrix is invertible by construction");
    let mut g = k_inv * h;
    let n1 = g.column(0).norm();
    let n2 = g.column(1).norm();
    if n1 < 1e-12 || n2 < 1e-12 {
        return Err(DetectError::Degenerate("homography collapses a plane axis".into()));
    }
    // A marker in front of the camera needs positive depth.
    if g[(2, 2)] < 0.0 {
        g = -g;
    }
    let scale = 2.0 / (n1 + n2);
    let r1 = g.column(0) * scale;
    let r2 = g.column(1) * scale;
    let r3 = r1.cross(&r2);
    let rough = Matrix3::from_columns(&[r1, r2, r3]);
    let rotation = reorthonormalize(&rough)
        .map_err(|_| DetectError::Degenerate("homography rotation is singular".into()))?;
    let translation = Vector3::new(g[(0, 2)], g[(1, 2)], g[(2, 2)]) * scale;
    if translation.z <= 0.0 {
        return Err(DetectError::Degenerate("homography places the plane behind the camera".into()));
    }
    Ok(Pose::new(rotation, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_rotation, project_point, rotation_angle};

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(900.0, 880.0, 315.0, 245.0, 640, 480).unwrap()
    }

    fn model_square(half: f64) -> [Vector2<f64>; 4] {
        [
            Vector2::new(-half, -half),
            Vector2::new(half, -half),
            Vector2::new(half, half),
            Vector2::new(-half, half),
        ]
    }

    fn project_square(pose: &Pose, half: f64) -> [Vector2<f64>; 4] {
        let intrinsics = test_intrinsics();
        let mut out = [Vector2::zeros(); 4];
        for (i, p) in model_square(half).iter().enumerate() {
            out[i] =
                project_point(pose, &intrinsics, &Vector3::new(p.x, p.y, 0.0)).unwrap();
        }
        out
    }

    #[test]
    fn dlt_maps_correspondences_exactly() {
        let src = model_square(0.05);
        let dst = [
            Vector2::new(100.3, 120.9),
            Vector2::new(210.4, 130.2),
            Vector2::new(200.8, 240.7),
            Vector2::new(95.1, 228.4),
        ];
        let h = homography_dlt(&src, &dst).unwrap();
        for i in 0..4 {
            let p = apply(&h, &src[i]);
            assert!((p - dst[i]).norm() < 1e-9, "corner {i} off by {}", (p - dst[i]).norm());
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let src = model_square(0.05);
        let dst = [
            Vector2::new(100.0, 100.0),
            Vector2::new(120.0, 100.0),
            Vector2::new(140.0, 100.0),
            Vector2::new(160.0, 100.0),
        ];
        assert!(matches!(
            homography_dlt(&src, &dst),
            Err(DetectError::Degenerate(_))
        ));
    }

    #[test]
    fn decomposition_recovers_pose_from_exact_projections() {
        let pose = Pose::new(
            exp_rotation(&Vector3::new(0.3, -0.2, 0.5)),
            Vector3::new(0.04, -0.03, 0.6),
        );
        let half = 0.05;
        let corners = project_square(&pose, half);
        let h = homography_dlt(&model_square(half), &corners).unwrap();
        let recovered = pose_from_homography(&h, &test_intrinsics()).unwrap();
        assert!(rotation_angle(&recovered.rotation, &pose.rotation) < 1e-6);
        assert!((recovered.translation - pose.translation).norm() < 1e-6);
    }

    #[test]
    fn decomposition_keeps_positive_depth_for_any_h_sign() {
        let pose = Pose::new(
            exp_rotation(&Vector3::new(-0.1, 0.25, 0.0)),
            Vector3::new(-0.02, 0.05, 0.9),
        );
        let half = 0.05;
        let corners = project_square(&pose, half);
        let h = homography_dlt(&model_square(half), &corners).unwrap();
        let flipped = -h;
        let recovered = pose_from_homography(&flipped, &test_intrinsics()).unwrap();
        assert!(recovered.translation.z > 0.0);
        assert!((recovered.translation - pose.translation).norm() < 1e-6);
    }
}
