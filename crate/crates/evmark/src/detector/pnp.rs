//! Pose from 4 coplanar point correspondences: homography initialization
//! refined by Levenberg-Marquardt on reprojection error.

use nalgebra::{SMatrix, SVector, Vector2, Vector3};

use crate::geometry::{exp_rotation, skew, CameraIntrinsics, MarkerModel, Pose};

use super::homography::{homography_dlt, pose_from_homography};
use super::DetectError;

const MAX_ITERATIONS: usize = 100;
const STEP_TOLERANCE: f64 = 1e-10;
const DAMPING_INIT: f64 = 1e-3;
const DAMPING_MAX: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct PnpResult {
    pub pose: Pose,
    /// Root-mean-square reprojection error over the 4 corners, pixels.
    pub rms_px: f64,
    pub iterations: usize,
}

fn residuals(
    pose: &Pose,
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
    corners: &[Vector2<f64>; 4],
) -> Option<SVector<f64, 8>> {
    let mut r = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let p = pose.transform(&model.vertices[i]);
        if p.z <= 1e-9 {
            return None;
        }
        r[2 * i] = intrinsics.fx * p.x / p.z + intrinsics.cx - corners[i].x;
        r[2 * i + 1] = intrinsics.fy * p.y / p.z + intrinsics.cy - corners[i].y;
    }
    Some(r)
}

/// Jacobian of the residuals with respect to (delta_rotation,
/// delta_translation), with the rotation update applied on the left:
/// R <- exp(delta_w) R.
fn jacobian(
    pose: &Pose,
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
) -> SMatrix<f64, 8, 6> {
    let mut j = SMatrix::<f64, 8, 6>::zeros();
    for i in 0..4 {
        let rotated = pose.rotation * model.vertices[i];
        let p = rotated + pose.translation;
        let z_inv = 1.0 / p.z;
        let proj = SMatrix::<f64, 2, 3>::new(
            intrinsics.fx * z_inv,
            0.0,
            -intrinsics.fx * p.x * z_inv * z_inv,
            0.0,
            intrinsics.fy * z_inv,
            -intrinsics.fy * p.y * z_inv * z_inv,
        );
        let dw = proj * (-skew(&rotated));
        for (col, block) in [(0, dw), (3, proj.into())] {
            let block: SMatrix<f64, 2, 3> = block;
            for r in 0..2 {
                for c in 0..3 {
                    j[(2 * i + r, col + c)] = block[(r, c)];
                }
            }
        }
    }
    j
}

fn quad_area(corners: &[Vector2<f64>; 4]) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        let a = corners[i];
        let b = corners[(i + 1) % 4];
        acc += a.x * b.y - b.x * a.y;
    }
    acc.abs() / 2.0
}

/// Solve the 4-point pose. `max_rms_px` gates acceptance; poses that do
/// not reproject that tightly are reported as errors, not returned.
pub fn solve_pnp(
    corners: &[Vector2<f64>; 4],
    model: &MarkerModel,
    intrinsics: &CameraIntrinsics,
    max_rms_px: f64,
) -> Result<PnpResult, DetectError> {
    if quad_area(corners) < 1.0 {
        return Err(DetectError::Degenerate("corner quad is collinear or tiny".into()));
    }
    let model_2d = [
        Vector2::new(model.vertices[0].x, model.vertices[0].y),
        Vector2::new(model.vertices[1].x, model.vertices[1].y),
        Vector2::new(model.vertices[2].x, model.vertices[2].y),
        Vector2::new(model.vertices[3].x, model.vertices[3].y),
    ];
    let h = homography_dlt(&model_2d, corners)?;
    let mut pose = pose_from_homography(&h, intrinsics)?;
    let mut residual = residuals(&pose, model, intrinsics, corners)
        .ok_or_else(|| DetectError::Degenerate("initial pose puts a vertex behind the camera".into()))?;
    let mut cost = residual.norm_squared();
    let mut damping = DAMPING_INIT;
    let mut iterations = 0;

    'outer: for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let j = jacobian(&pose, model, intrinsics);
        let jtj = j.transpose() * j;
        let jtr = j.transpose() * residual;
        loop {
            if damping > DAMPING_MAX {
                break 'outer;
            }
            let mut lhs = jtj;
            for d in 0..6 {
                lhs[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some(delta) = lhs.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                damping *= 10.0;
                continue;
            };
            let dw = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let candidate = Pose::new(exp_rotation(&dw) * pose.rotation, pose.translation + dt);
            let candidate_residual = residuals(&candidate, model, intrinsics, corners);
            let candidate_cost = candidate_residual.as_ref().map(|r| r.norm_squared());
            match candidate_cost {
                Some(c) if c < cost => {
                    pose = candidate;
                    residual = candidate_residual.unwrap();
                    cost = c;
                    damping = (damping / 10.0).max(1e-12);
                    if delta.norm() < STEP_TOLERANCE {
                        break 'outer;
                    }
                    break;
                }
                _ => damping *= 10.0,
            }
        }
    }

    if pose.translation.z <= 0.0 {
        return Err(DetectError::Degenerate("refined pose has non-positive depth".into()));
    }
    let rms_px = (cost / 4.0).sqrt();
    if rms_px > max_rms_px {
        return Err(DetectError::RmsExceeded { rms_px, limit: max_rms_px });
    }
    Ok(PnpResult { pose, rms_px, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_rotation, project_point, rotation_angle, BitGrid};
    use nalgebra::Matrix3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn test_model() -> MarkerModel {
        let bits = (0..16).map(|i| i % 3 == 0).collect();
        MarkerModel::new(0, 0.1, BitGrid::new(4, bits))
    }

    fn random_pose(rng: &mut StdRng) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-1.0..1.0),
        );
        Pose::new(
            exp_rotation(&axis),
            Vector3::new(
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.1..0.1),
                rng.random_range(0.4..1.2),
            ),
        )
    }

    fn project_corners(pose: &Pose, model: &MarkerModel) -> [Vector2<f64>; 4] {
        let intrinsics = test_intrinsics();
        let mut out = [Vector2::zeros(); 4];
        for (i, v) in model.vertices.iter().enumerate() {
            out[i] = project_point(pose, &intrinsics, v).unwrap();
        }
        out
    }

    #[test]
    fn zero_noise_fixed_point() {
        let model = test_model();
        let intrinsics = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let corners = project_corners(&pose, &model);
            let solved = solve_pnp(&corners, &model, &intrinsics, 2.0).unwrap();
            assert!((solved.pose.translation - pose.translation).norm() < 1e-6);
            assert!(rotation_angle(&solved.pose.rotation, &pose.rotation) < 1e-6);
            assert!(solved.rms_px < 1e-6);
        }
    }

    #[test]
    fn half_pixel_noise_keeps_translation_within_5mm_on_average() {
        let model = test_model();
        let intrinsics = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(23);
        let pose = Pose::new(
            exp_rotation(&Vector3::new(0.2, -0.15, 0.1)),
            Vector3::new(0.02, 0.01, 0.5),
        );
        let clean = project_corners(&pose, &model);
        let mut total_err = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let mut corners = clean;
            for c in corners.iter_mut() {
                // Box-Muller for approximately Gaussian 0.5 px noise.
                let (u1, u2): (f64, f64) =
                    (rng.random_range(1e-9..1.0), rng.random_range(0.0..1.0));
                let r = (-2.0 * u1.ln()).sqrt() * 0.5;
                c.x += r * (2.0 * std::f64::consts::PI * u2).cos();
                c.y += r * (2.0 * std::f64::consts::PI * u2).sin();
            }
            let solved = solve_pnp(&corners, &model, &intrinsics, 5.0).unwrap();
            total_err += (solved.pose.translation - pose.translation).norm();
        }
        let mean_err = total_err / trials as f64;
        assert!(mean_err < 5e-3, "mean translation error {:.2} mm", mean_err * 1e3);
    }

    #[test]
    fn collinear_corners_are_rejected() {
        let model = test_model();
        let corners = [
            Vector2::new(100.0, 100.0),
            Vector2::new(150.0, 100.0),
            Vector2::new(200.0, 100.0),
            Vector2::new(250.0, 100.0),
        ];
        assert!(matches!(
            solve_pnp(&corners, &model, &test_intrinsics(), 2.0),
            Err(DetectError::Degenerate(_))
        ));
    }

    #[test]
    fn gross_corner_corruption_fails_the_rms_gate() {
        let model = test_model();
        let intrinsics = test_intrinsics();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.6));
        let mut corners = project_corners(&pose, &model);
        corners[2].x += 25.0;
        let result = solve_pnp(&corners, &model, &intrinsics, 2.0);
        assert!(matches!(result, Err(DetectError::RmsExceeded { .. })));
    }
}
