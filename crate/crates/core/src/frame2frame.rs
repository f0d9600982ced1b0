//! Frame-to-frame motion prior from joint PnP and epipolar costs.
//!
//! The motion `M` maps previous-camera coordinates into the current camera:
//! `X_cur = M·X_prev`.

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix3, RowVector6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    backproject, fundamental_matrix, project_with_jacobian, skew, CameraIntrinsics, GeometryError, Pose, Vec2, Vec3,
};
use crate::solver::{
    solve_lm, CostFunction, LmOptions, Manifold, Parameter, Problem, ResidualTag, RobustLoss, SolverError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("underconstrained motion: {with_depth} matches with depth, {total} in total")]
    Underconstrained { with_depth: usize, total: usize },
    #[error("invalid match {index}: {reason}")]
    InvalidMatch { index: usize, reason: String },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// A feature seen in the previous frame (`previous`, optionally with depth)
/// and the current frame (`current`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMatch {
    pub current: Vec2,
    pub previous: Vec2,
    pub depth_prev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatchSet {
    pub matches: Vec<FrameMatch>,
    pub intrinsics: CameraIntrinsics,
}

/// Largest depth a match may carry.
pub const MAX_MATCH_DEPTH: f64 = 30.0;

impl FrameMatchSet {
    pub fn new(matches: Vec<FrameMatch>, intrinsics: CameraIntrinsics) -> Result<Self, PriorError> {
        for (index, m) in matches.iter().enumerate() {
            if !intrinsics.contains(&m.current) || !intrinsics.contains(&m.previous) {
                return Err(PriorError::InvalidMatch {
                    index,
                    reason: "pixel outside image".into(),
                });
            }
            if let Some(d) = m.depth_prev {
                if !(d > 0.0 && d <= MAX_MATCH_DEPTH) {
                    return Err(PriorError::InvalidMatch {
                        index,
                        reason: format!("depth {d} outside (0, {MAX_MATCH_DEPTH}]"),
                    });
                }
            }
        }
        Ok(Self { matches, intrinsics })
    }

    pub fn with_depth(&self) -> usize {
        self.matches.iter().filter(|m| m.depth_prev.is_some()).count()
    }
}

/// `p̄ − π(M · backproject(p̃, d))`.
pub fn pnp_residual(m: &FrameMatch, motion: &Pose, intrinsics: &CameraIntrinsics) -> Result<Vec2, GeometryError> {
    let depth = m.depth_prev.expect("pnp residual requires a depth");
    let point = backproject(&m.previous, depth, intrinsics);
    let (pixel, _) = project_with_jacobian(&motion.transform_point(&point), intrinsics)?;
    Ok(m.current - pixel)
}

/// Algebraic epipolar error `p̄ᵀ·F(M)·p̃` in homogeneous pixels.
pub fn epipolar_residual(m: &FrameMatch, motion: &Pose, intrinsics: &CameraIntrinsics) -> f64 {
    let f = fundamental_matrix(motion, intrinsics);
    (m.current.push(1.0).transpose() * f * m.previous.push(1.0))[0]
}

/// Reprojection of a previous-frame 3D point into the current frame.
#[derive(Debug, Clone)]
pub struct PnpCost {
    pub observed: Vec2,
    pub point_prev: Vec3,
    pub intrinsics: CameraIntrinsics,
}

impl PnpCost {
    pub fn from_match(m: &FrameMatch, intrinsics: &CameraIntrinsics) -> Option<Self> {
        m.depth_prev.map(|d| Self {
            observed: m.current,
            point_prev: backproject(&m.previous, d, intrinsics),
            intrinsics: *intrinsics,
        })
    }
}

impl CostFunction for PnpCost {
    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&Parameter], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, SolverError> {
        let motion = params[0].as_pose();
        let rotated = motion.rotation * self.point_prev;
        let cam = rotated + motion.translation;
        let (pixel, dproj) = project_with_jacobian(&cam, &self.intrinsics)?;
        if let Some(j) = jacobians {
            let mut dcam = nalgebra::Matrix3x6::zeros();
            dcam.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rotated)));
            dcam.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let jac: Matrix2x6<f64> = -(dproj * dcam);
            j[0].copy_from(&jac);
        }
        let r = self.observed - pixel;
        Ok(DVector::from_column_slice(r.as_slice()))
    }
}

/// Epipolar error of one correspondence as a function of the motion.
#[derive(Debug, Clone)]
pub struct EpipolarCost {
    pub current: Vec2,
    pub previous: Vec2,
    pub intrinsics: CameraIntrinsics,
}

impl CostFunction for EpipolarCost {
    fn residual_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, params: &[&Parameter], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, SolverError> {
        let motion = params[0].as_pose();
        let kinv = self.intrinsics.inverse_matrix();
        let kinv_t = kinv.transpose();
        let r = motion.rotation_matrix();
        let t = motion.translation;
        let raw = kinv_t * skew(&t) * r * kinv;
        let norm = raw.norm();
        let cur = self.current.push(1.0);
        let prev = self.previous.push(1.0);
        if norm < 1e-300 {
            // Pure rotation: the epipolar constraint is void.
            if let Some(j) = jacobians {
                j[0].fill(0.0);
            }
            return Ok(DVector::zeros(1));
        }
        let f = raw / norm;
        let value = (cur.transpose() * f * prev)[0];
        if let Some(j) = jacobians {
            let mut row = RowVector6::zeros();
            for k in 0..6 {
                let e = Vector3::ith(k % 3, 1.0);
                let dg = if k < 3 { skew(&t) * skew(&e) * r } else { skew(&e) * r };
                let draw = kinv_t * dg * kinv;
                let dnorm = f.dot(&draw);
                let df = (draw - f * dnorm) / norm;
                row[k] = (cur.transpose() * df * prev)[0];
            }
            j[0].copy_from(&row);
        }
        Ok(DVector::from_element(1, value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Cauchy scale of the PnP term, pixels.
    pub pnp_loss_scale: f64,
    /// Cauchy scale of the epipolar term.
    pub epipolar_loss_scale: f64,
    pub pnp_weight: f64,
    pub epipolar_weight: f64,
    pub use_epipolar: bool,
    pub max_iterations: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            pnp_loss_scale: 1.0,
            epipolar_loss_scale: 1.0,
            pnp_weight: 1.0,
            epipolar_weight: 1.0,
            use_epipolar: true,
            max_iterations: 50,
        }
    }
}

/// Minimum number of matches carrying depth for a metric estimate.
pub const MIN_DEPTH_MATCHES: usize = 3;
/// Minimum number of matches for a scale-free estimate.
pub const MIN_TOTAL_MATCHES: usize = 8;

/// Estimates the previous-to-current motion minimising the robustified PnP
/// plus epipolar cost, starting from `init`.
///
/// Without any depth the translation length is unobservable and is held at
/// the length of `init`; only rotation and translation direction move.
pub fn estimate_prior(matches: &FrameMatchSet, init: &Pose, cfg: &PriorConfig) -> Result<Pose, PriorError> {
    let with_depth = matches.with_depth();
    let total = matches.matches.len();
    if with_depth < MIN_DEPTH_MATCHES && total < MIN_TOTAL_MATCHES {
        return Err(PriorError::Underconstrained { with_depth, total });
    }
    let intr = &matches.intrinsics;
    let mut problem = Problem::new();
    let manifold = if with_depth == 0 {
        Manifold::PoseFixedScale
    } else {
        Manifold::Pose
    };
    let motion = problem.add_parameter(Parameter::Pose(*init), manifold);
    let init_param = Parameter::Pose(*init);

    for m in &matches.matches {
        if let Some(cost) = PnpCost::from_match(m, intr) {
            // Points already behind the camera at the initial guess are dropped.
            if cost.evaluate(&[&init_param], None).is_err() {
                continue;
            }
            problem.add_residual(
                Box::new(cost),
                &[motion],
                RobustLoss::cauchy(cfg.pnp_loss_scale),
                cfg.pnp_weight,
                ResidualTag::PnP,
            )?;
        }
        if cfg.use_epipolar {
            problem.add_residual(
                Box::new(EpipolarCost {
                    current: m.current,
                    previous: m.previous,
                    intrinsics: *intr,
                }),
                &[motion],
                RobustLoss::cauchy(cfg.epipolar_loss_scale),
                cfg.epipolar_weight,
                ResidualTag::Epipolar,
            )?;
        }
    }
    if problem.num_residuals() == 0 {
        return Err(PriorError::Underconstrained { with_depth, total });
    }
    let options = LmOptions {
        max_iterations: cfg.max_iterations,
        ..LmOptions::default()
    };
    solve_lm(&mut problem, &options)?;
    Ok(*problem.parameter(motion).as_pose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::solver::{analytic_jacobians, finite_difference_jacobians, max_relative_difference};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Previous-frame points and their projections under `motion`.
    fn scene(motion: &Pose, n: usize, n_depth: usize, seed: u64) -> FrameMatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matches = Vec::new();
        while matches.len() < n {
            let prev = Vec3::new(rng.random_range(-8.0..8.0), rng.random_range(-4.0..4.0), rng.random_range(4.0..28.0));
            let cur = motion.transform_point(&prev);
            let (Ok(pp), Ok(pc)) = (project(&prev, &cam()), project(&cur, &cam())) else { continue };
            if !cam().contains(&pp) || !cam().contains(&pc) {
                continue;
            }
            let depth_prev = (matches.len() < n_depth).then_some(prev.z);
            matches.push(FrameMatch {
                current: pc,
                previous: pp,
                depth_prev,
            });
        }
        FrameMatchSet::new(matches, cam()).unwrap()
    }

    fn forward_yaw(forward: f64, yaw_deg: f64) -> Pose {
        // Camera moving forward by `forward` metres: points shift by -forward in z.
        Pose::from_axis_angle(Vec3::new(0.0, yaw_deg.to_radians(), 0.0), Vec3::new(0.0, 0.0, -forward))
    }

    #[test]
    fn pnp_residual_zero_at_identity_for_static_point() {
        let m = FrameMatch {
            current: Vec2::new(300.0, 200.0),
            previous: Vec2::new(300.0, 200.0),
            depth_prev: Some(7.0),
        };
        assert_eq!(pnp_residual(&m, &Pose::identity(), &cam()).unwrap(), Vec2::zeros());
    }

    #[test]
    fn pnp_residual_zero_at_generating_motion() {
        let motion = forward_yaw(0.8, 3.0);
        let set = scene(&motion, 30, 30, 1);
        for m in &set.matches {
            assert!(pnp_residual(m, &motion, &cam()).unwrap().norm() < 1e-9);
        }
    }

    #[test]
    fn pnp_residual_forward_motion_gap() {
        // Axis-offset point: x = 1 at z = 10 projects to u = 370; after 1 m
        // forward, z = 9 gives u = 320 + 500/9.
        let prev = Vec3::new(1.0, 0.0, 10.0);
        let motion = forward_yaw(1.0, 0.0);
        let current = project(&motion.transform_point(&prev), &cam()).unwrap();
        let m = FrameMatch {
            current,
            previous: project(&prev, &cam()).unwrap(),
            depth_prev: Some(10.0),
        };
        let r = pnp_residual(&m, &Pose::identity(), &cam()).unwrap();
        let expected = 500.0 / 9.0 - 50.0;
        assert!((r.x - expected).abs() < 1e-9 && r.y.abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn pnp_residual_behind_camera_fails() {
        let m = FrameMatch {
            current: Vec2::new(320.0, 240.0),
            previous: Vec2::new(320.0, 240.0),
            depth_prev: Some(2.0),
        };
        let back = Pose::from_translation(Vec3::new(0.0, 0.0, -5.0));
        assert!(matches!(pnp_residual(&m, &back, &cam()), Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn epipolar_residual_properties() {
        let motion = forward_yaw(0.6, 2.0);
        let set = scene(&motion, 20, 0, 2);
        let scaled = Pose::new(motion.rotation, motion.translation * 2.0);
        for m in &set.matches {
            assert!(epipolar_residual(m, &motion, &cam()).abs() < 1e-9);
            assert!(epipolar_residual(m, &scaled, &cam()).abs() < 1e-9);
        }
        let mismatch = FrameMatch {
            current: Vec2::new(100.0, 400.0),
            previous: Vec2::new(500.0, 50.0),
            depth_prev: None,
        };
        let kinv = cam().inverse_matrix();
        let f = kinv.transpose() * skew(&motion.translation) * motion.rotation_matrix() * kinv;
        let f = f / f.norm();
        let oracle = (mismatch.current.push(1.0).transpose() * f * mismatch.previous.push(1.0))[0];
        let r = epipolar_residual(&mismatch, &motion, &cam());
        assert!(r.abs() > 1e-3);
        assert!((r - oracle).abs() < 1e-12);
        assert_eq!(r, epipolar_residual(&mismatch, &scaled, &cam()));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let motion = Pose::from_axis_angle(
                Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            );
            let m = FrameMatch {
                current: Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                previous: Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                depth_prev: Some(rng.random_range(5.0..30.0)),
            };
            let p = Parameter::Pose(motion);
            let costs: Vec<Box<dyn CostFunction>> = vec![
                Box::new(PnpCost::from_match(&m, &cam()).unwrap()),
                Box::new(EpipolarCost {
                    current: m.current,
                    previous: m.previous,
                    intrinsics: cam(),
                }),
            ];
            for cost in &costs {
                let a = analytic_jacobians(cost.as_ref(), &[&p]).unwrap();
                let n = finite_difference_jacobians(cost.as_ref(), &[&p], 1e-6).unwrap();
                assert!(max_relative_difference(&a[0], &n[0]) < 1e-5);
            }
        }
    }

    #[test]
    fn recovers_noiseless_motion() {
        let truth = forward_yaw(0.5, 2.0);
        let set = scene(&truth, 50, 20, 4);
        let est = estimate_prior(&set, &Pose::identity(), &PriorConfig::default()).unwrap();
        assert!((est.translation - truth.translation).norm() < 1e-6);
        assert!(est.rotation.angle_to(&truth.rotation) < 1e-6);
    }

    #[test]
    fn pnp_only_twenty_points() {
        let truth = forward_yaw(1.1, -1.5);
        let set = scene(&truth, 20, 20, 8);
        let cfg = PriorConfig {
            use_epipolar: false,
            ..PriorConfig::default()
        };
        let est = estimate_prior(&set, &Pose::identity(), &cfg).unwrap();
        assert!((est.translation - truth.translation).norm() < 1e-8);
        assert!(est.rotation.angle_to(&truth.rotation) < 1e-8);
    }

    #[test]
    fn zero_motion_stays_identity() {
        let set = scene(&Pose::identity(), 40, 20, 5);
        let est = estimate_prior(&set, &Pose::identity(), &PriorConfig::default()).unwrap();
        assert!(est.translation.norm() < 1e-9);
        assert!(est.rotation.angle() < 1e-9);
    }

    #[test]
    fn robust_to_ten_percent_outliers() {
        let truth = forward_yaw(0.5, 2.0);
        let mut set = scene(&truth, 100, 60, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for m in set.matches.iter_mut().step_by(10) {
            m.current = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let est = estimate_prior(&set, &Pose::identity(), &PriorConfig::default()).unwrap();
        assert!((est.translation - truth.translation).norm() < 0.01);
        assert!(est.rotation.angle_to(&truth.rotation).to_degrees() < 0.05);
    }

    #[test]
    fn underconstrained_is_reported() {
        let set = scene(&forward_yaw(0.5, 0.0), 5, 2, 7);
        assert_eq!(
            estimate_prior(&set, &Pose::identity(), &PriorConfig::default()).unwrap_err(),
            PriorError::Underconstrained { with_depth: 2, total: 5 }
        );
    }

    #[test]
    fn without_depth_translation_length_is_held() {
        let truth = forward_yaw(0.5, 1.0);
        let set = scene(&truth, 40, 0, 8);
        for scale in [0.3, 1.0, 4.0] {
            let init = Pose::new(
                truth.rotation * nalgebra::UnitQuaternion::from_scaled_axis(Vec3::new(0.0, 0.004, 0.0)),
                (truth.translation + Vec3::new(0.02, 0.0, 0.0)).normalize() * scale,
            );
            let est = estimate_prior(&set, &init, &PriorConfig::default()).unwrap();
            assert!((est.translation.norm() - scale).abs() < 1e-12);
            let dir = est.translation.normalize();
            assert!((dir - truth.translation.normalize()).norm() < 1e-6, "scale {scale}: {dir:?}");
            assert!(est.rotation.angle_to(&truth.rotation) < 1e-6);
        }
    }

    #[test]
    fn equivariant_under_camera_rotation() {
        let truth = forward_yaw(0.5, 2.0);
        let q = Pose::from_axis_angle(Vec3::new(0.01, -0.02, 0.015), Vec3::zeros());
        let conj = q.compose(&truth).compose(&q.inverse());
        let base = scene(&truth, 50, 25, 9);
        // Same 3D points seen through a rotated camera frame.
        let rotated: Vec<FrameMatch> = base
            .matches
            .iter()
            .filter_map(|m| {
                let depth = m.depth_prev.unwrap_or(10.0);
                let prev = q.transform_point(&backproject(&m.previous, depth, &cam()));
                let cur = conj.transform_point(&prev);
                let pp = project(&prev, &cam()).ok()?;
                let pc = project(&cur, &cam()).ok()?;
                (cam().contains(&pp) && cam().contains(&pc)).then_some(FrameMatch {
                    current: pc,
                    previous: pp,
                    depth_prev: m.depth_prev.map(|_| prev.z),
                })
            })
            .collect();
        let rotated = FrameMatchSet::new(rotated, cam()).unwrap();
        let a = estimate_prior(&base, &Pose::identity(), &PriorConfig::default()).unwrap();
        let b = estimate_prior(&rotated, &Pose::identity(), &PriorConfig::default()).unwrap();
        let expected = q.compose(&a).compose(&q.inverse());
        assert!((b.translation - expected.translation).norm() < 1e-8);
        assert!(b.rotation.angle_to(&expected.rotation) < 1e-8);
    }

    #[test]
    fn epipolar_terms_do_not_hurt_rotation() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let truth = forward_yaw(rng.random_range(0.2..1.0), rng.random_range(-3.0..3.0));
            let set = scene(&truth, 40, 10, 200 + seed);
            let with = estimate_prior(&set, &Pose::identity(), &PriorConfig::default()).unwrap();
            let without = estimate_prior(
                &set,
                &Pose::identity(),
                &PriorConfig {
                    use_epipolar: false,
                    ..PriorConfig::default()
                },
            )
            .unwrap();
            let err_with = with.rotation.angle_to(&truth.rotation);
            let err_without = without.rotation.angle_to(&truth.rotation);
            assert!(err_with <= err_without.max(1e-9), "seed {seed}: {err_with} vs {err_without}");
        }
    }

    #[test]
    fn invalid_match_rejected() {
        let m = FrameMatch {
            current: Vec2::new(10.0, 10.0),
            previous: Vec2::new(10.0, 10.0),
            depth_prev: Some(45.0),
        };
        assert!(matches!(
            FrameMatchSet::new(vec![m], cam()),
            Err(PriorError::InvalidMatch { index: 0, .. })
        ));
    }
}
