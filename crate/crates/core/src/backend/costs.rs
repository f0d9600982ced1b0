use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, RowVector3};

use crate::geometry::{project_with_jacobian, skew, CameraIntrinsics, Pose, Vec2, Vec3};
use crate::solver::{CostFunction, Parameter, SolverError};

/// `∂(R·X + t)/∂(δω, δt) = [−[R·X]×, I]`.
fn transform_jacobian(pose: &Pose, x: &Vec3) -> (Vec3, Matrix3x6<f64>) {
    let rotated = pose.rotation * x;
    let mut d = Matrix3x6::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rotated)));
    d.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    (rotated + pose.translation, d)
}

/// `observed − π(P·l)`; parameters `[pose, landmark]`.
#[derive(Debug, Clone)]
pub struct ReprojectionCost {
    pub observed: Vec2,
    pub intrinsics: CameraIntrinsics,
}

impl CostFunction for ReprojectionCost {
    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&Parameter], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, SolverError> {
        let pose = params[0].as_pose();
        let l = params[1].as_point();
        let (cam, dcam) = transform_jacobian(pose, &l);
        let (pixel, dproj) = project_with_jacobian(&cam, &self.intrinsics)?;
        if let Some(j) = jacobians {
            j[0].copy_from(&(-(dproj * dcam)));
            j[1].copy_from(&(-(dproj * pose.rotation_matrix())));
        }
        let r = self.observed - pixel;
        Ok(DVector::from_column_slice(r.as_slice()))
    }
}

/// `d̂ − [0 0 1]·(P·l)`; parameters `[pose, landmark]`.
#[derive(Debug, Clone)]
pub struct DepthCost {
    pub measured: f64,
}

impl CostFunction for DepthCost {
    fn residual_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, params: &[&Parameter], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, SolverError> {
        let pose = params[0].as_pose();
        let l = params[1].as_point();
        let (cam, dcam) = transform_jacobian(pose, &l);
        if let Some(j) = jacobians {
            j[0].copy_from(&(-dcam.row(2)));
            j[1].copy_from(&(-pose.rotation_matrix().row(2)));
        }
        Ok(DVector::from_element(1, self.measured - cam.z))
    }
}

/// Translation length between two poses: the distance between their camera
/// centres, i.e. the translation norm of the relative motion `P1·P0⁻¹`.
/// `squared` selects `‖·‖²`.
pub fn translation_length(p0: &Pose, p1: &Pose, squared: bool) -> f64 {
    let d = (p1.center() - p0.center()).norm_squared();
    if squared {
        d
    } else {
        d.sqrt()
    }
}

/// `ŝ(P1, P0) − s`; parameters `[P0, P1]`.
#[derive(Debug, Clone)]
pub struct ScaleCost {
    pub target: f64,
    pub squared: bool,
}

/// `∂c/∂(δω, δt)` of the camera centre `c = −Rᵀt`.
fn center_jacobian(p: &Pose) -> Matrix3x6<f64> {
    let rt = p.rotation_matrix().transpose();
    let mut d = Matrix3x6::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rt * skew(&p.translation)));
    d.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt));
    d
}

impl CostFunction for ScaleCost {
    fn residual_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, params: &[&Parameter], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, SolverError> {
        let p0 = params[0].as_pose();
        let p1 = params[1].as_pose();
        let d = p1.center() - p0.center();
        let len = d.norm();
        let s = if self.squared { len * len } else { len };
        if let Some(j) = jacobians {
            let g: RowVector3<f64> = if self.squared {
                2.0 * d.transpose()
            } else if len > 0.0 {
                d.transpose() / len
            } else {
                RowVector3::zeros()
            };
            j[0].copy_from(&(-(g * center_jacobian(p0))));
            j[1].copy_from(&(g * center_jacobian(p1)));
        }
        Ok(DVector::from_element(1, s - self.target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{analytic_jacobians, finite_difference_jacobians, max_relative_difference};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(718.0, 718.0, 607.0, 185.0, 1241, 376).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let w = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0));
        Pose::from_axis_angle(w, t)
    }

    fn check(cost: &dyn CostFunction, params: &[&Parameter]) {
        let a = analytic_jacobians(cost, params).unwrap();
        let n = finite_difference_jacobians(cost, params, 1e-6).unwrap();
        for (a, n) in a.iter().zip(&n) {
            let e = max_relative_difference(a, n);
            assert!(e < 1e-5, "relative jacobian error {e}\n{a}\n{n}");
        }
    }

    #[test]
    fn depth_residual_examples() {
        let c = DepthCost { measured: 8.0 };
        let pose = Parameter::Pose(Pose::identity());
        let l = Parameter::point(Vec3::new(0.0, 0.0, 10.0));
        assert_eq!(c.evaluate(&[&pose, &l], None).unwrap()[0], -2.0);
        let c = DepthCost { measured: 10.0 };
        assert_eq!(c.evaluate(&[&pose, &l], None).unwrap()[0], 0.0);
    }

    #[test]
    fn scale_residual_examples() {
        let p0 = Pose::identity();
        let p1 = Pose::from_translation(Vec3::new(0.0, 0.0, -1.0));
        let s = translation_length(&p0, &p1, true);
        assert_eq!(s, 1.0);
        let cost = ScaleCost { target: s, squared: true };
        let eval = |a: &Pose, b: &Pose| {
            cost.evaluate(&[&Parameter::Pose(*a), &Parameter::Pose(*b)], None).unwrap()[0]
        };
        assert_eq!(eval(&p0, &p1), 0.0);
        let doubled = Pose::from_translation(Vec3::new(0.0, 0.0, -2.0));
        assert_eq!(eval(&p0, &doubled), 3.0);
        // Rotating the second camera about its own centre keeps the length.
        let turned = Pose::from_axis_angle(Vec3::new(0.0, 0.3, 0.0), Vec3::zeros()).compose(&p1);
        assert!(eval(&p0, &turned).abs() < 1e-12);
        let plain = ScaleCost { target: 1.0, squared: false };
        let r = plain
            .evaluate(&[&Parameter::Pose(p0), &Parameter::Pose(doubled)], None)
            .unwrap()[0];
        assert_eq!(r, 1.0);
    }

    #[test]
    fn reprojection_zero_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = random_pose(&mut rng);
        let l = pose.inverse().transform_point(&Vec3::new(1.0, -0.5, 12.0));
        let pixel = crate::geometry::project(&pose.transform_point(&l), &intr()).unwrap();
        let c = ReprojectionCost {
            observed: pixel,
            intrinsics: intr(),
        };
        let r = c.evaluate(&[&Parameter::Pose(pose), &Parameter::point(l)], None).unwrap();
        assert!(r.norm() < 1e-9);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let cam = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0), rng.random_range(3.0..60.0));
            let l = pose.inverse().transform_point(&cam);
            let pp = Parameter::Pose(pose);
            let pl = Parameter::point(l);
            let obs = Vec2::new(rng.random_range(0.0..1241.0), rng.random_range(0.0..376.0));
            check(&ReprojectionCost { observed: obs, intrinsics: intr() }, &[&pp, &pl]);
            check(&DepthCost { measured: rng.random_range(1.0..30.0) }, &[&pp, &pl]);
            let p1 = Parameter::Pose(random_pose(&mut rng));
            for squared in [true, false] {
                check(&ScaleCost { target: 1.0, squared }, &[&pp, &p1]);
            }
        }
    }
}
