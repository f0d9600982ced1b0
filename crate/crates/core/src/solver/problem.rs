use nalgebra::{DMatrix, DVector, Matrix6x5, Vector6};
use serde::{Deserialize, Serialize};

use super::loss::RobustLoss;
use super::SolverError;
use crate::geometry::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResidualId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Parameter {
    Vector(DVector<f64>),
    Pose(Pose),
}

impl Parameter {
    pub fn point(p: Vec3) -> Self {
        Parameter::Vector(DVector::from_column_slice(p.as_slice()))
    }

    pub fn as_pose(&self) -> &Pose {
        match self {
            Parameter::Pose(p) => p,
            Parameter::Vector(_) => panic!("parameter is a vector, not a pose"),
        }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        match self {
            Parameter::Vector(v) => v,
            Parameter::Pose(_) => panic!("parameter is a pose, not a vector"),
        }
    }

    pub fn as_point(&self) -> Vec3 {
        let v = self.as_vector();
        Vec3::new(v[0], v[1], v[2])
    }

    /// Dimension of the tangent space cost functions differentiate against.
    pub fn jacobian_dim(&self) -> usize {
        match self {
            Parameter::Vector(v) => v.len(),
            Parameter::Pose(_) => 6,
        }
    }
}

/// How a parameter block is updated by the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Euclidean,
    /// Full 6-DOF pose, local increment `(δω, δt)`.
    Pose,
    /// Pose whose translation norm is held fixed: rotation plus translation direction.
    PoseFixedScale,
}

#[derive(Debug, Clone)]
pub struct ParameterBlock {
    pub value: Parameter,
    pub manifold: Manifold,
    pub constant: bool,
}

impl ParameterBlock {
    pub fn local_dim(&self) -> usize {
        match self.manifold {
            Manifold::Euclidean => self.value.jacobian_dim(),
            Manifold::Pose => 6,
            Manifold::PoseFixedScale => 5,
        }
    }

    /// Maps a local increment to the cost-function tangent (`jacobian_dim × local_dim`).
    pub(crate) fn lift(&self) -> Option<DMatrix<f64>> {
        match self.manifold {
            Manifold::Euclidean | Manifold::Pose => None,
            Manifold::PoseFixedScale => {
                let basis = translation_tangent_basis(&self.value.as_pose().translation);
                let mut m = Matrix6x5::zeros();
                m[(0, 0)] = 1.0;
                m[(1, 1)] = 1.0;
                m[(2, 2)] = 1.0;
                m.fixed_view_mut::<3, 1>(3, 3).copy_from(&basis.0);
                m.fixed_view_mut::<3, 1>(3, 4).copy_from(&basis.1);
                Some(DMatrix::from_column_slice(6, 5, m.as_slice()))
            }
        }
    }

    pub(crate) fn retract(&self, delta: &[f64]) -> Parameter {
        match (&self.value, self.manifold) {
            (Parameter::Vector(v), _) => Parameter::Vector(v + DVector::from_column_slice(delta)),
            (Parameter::Pose(p), Manifold::Pose) => Parameter::Pose(p.retract(&Vector6::from_column_slice(delta))),
            (Parameter::Pose(p), Manifold::PoseFixedScale) => {
                let norm = p.translation.norm();
                let (b1, b2) = translation_tangent_basis(&p.translation);
                let dt = b1 * delta[3] + b2 * delta[4];
                let full = Vector6::new(delta[0], delta[1], delta[2], dt.x, dt.y, dt.z);
                let mut next = p.retract(&full);
                let n = next.translation.norm();
                if n > 0.0 {
                    next.translation *= norm / n;
                }
                Parameter::Pose(next)
            }
            (Parameter::Pose(_), Manifold::Euclidean) => unreachable!("validated at insertion"),
        }
    }
}

fn translation_tangent_basis(t: &Vec3) -> (Vec3, Vec3) {
    let n = t.norm();
    let dir = if n > 0.0 { t / n } else { Vec3::z() };
    let helper = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let b1 = dir.cross(&helper).normalize();
    let b2 = dir.cross(&b1);
    (b1, b2)
}

/// Class of a residual block; trimming acts per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResidualTag {
    Reprojection,
    Depth,
    ScaleRegularizer,
    Epipolar,
    PnP,
    Other,
}

/// A residual function of one or more parameter blocks.
///
/// Jacobians are taken with respect to [`Parameter::jacobian_dim`] tangents:
/// the plain coordinates of vector blocks, and the `(δω, δt)` increment of
/// [`Pose::retract`] for poses.
pub trait CostFunction: Send + Sync {
    fn residual_dim(&self) -> usize;

    /// Evaluates the residual; fills `jacobians[i]` (`residual_dim × jacobian_dim(i)`)
    /// when requested.
    fn evaluate(
        &self,
        params: &[&Parameter],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> Result<DVector<f64>, SolverError>;
}

pub struct ResidualBlock {
    pub cost: Box<dyn CostFunction>,
    pub params: Vec<ParamId>,
    pub loss: RobustLoss,
    pub weight: f64,
    pub tag: ResidualTag,
}

impl std::fmt::Debug for ResidualBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResidualBlock")
            .field("params", &self.params)
            .field("loss", &self.loss)
            .field("weight", &self.weight)
            .field("tag", &self.tag)
            .finish()
    }
}

/// A robust nonlinear least-squares problem `Σ wᵢ·ρᵢ(‖rᵢ‖²)`.
///
/// Blocks keep their ids for the lifetime of the problem; removed slots stay
/// empty so ids held by callers remain meaningful.
#[derive(Debug, Default)]
pub struct Problem {
    params: Vec<Option<ParameterBlock>>,
    residuals: Vec<Option<ResidualBlock>>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_parameter(&mut self, value: Parameter, manifold: Manifold) -> ParamId {
        match (&value, manifold) {
            (Parameter::Vector(_), Manifold::Euclidean) | (Parameter::Pose(_), Manifold::Pose | Manifold::PoseFixedScale) => {}
            _ => panic!("manifold {manifold:?} does not match parameter kind"),
        }
        self.params.push(Some(ParameterBlock {
            value,
            manifold,
            constant: false,
        }));
        ParamId(self.params.len() - 1)
    }

    pub fn add_pose(&mut self, pose: Pose) -> ParamId {
        self.add_parameter(Parameter::Pose(pose), Manifold::Pose)
    }

    pub fn add_point(&mut self, p: Vec3) -> ParamId {
        self.add_parameter(Parameter::point(p), Manifold::Euclidean)
    }

    pub fn set_constant(&mut self, id: ParamId, constant: bool) {
        self.block_mut(id).constant = constant;
    }

    pub fn add_residual(
        &mut self,
        cost: Box<dyn CostFunction>,
        params: &[ParamId],
        loss: RobustLoss,
        weight: f64,
        tag: ResidualTag,
    ) -> Result<ResidualId, SolverError> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(SolverError::InvalidBlock(format!("weight must be positive, got {weight}")));
        }
        if !(loss.scale > 0.0) {
            return Err(SolverError::InvalidBlock(format!("loss scale must be positive, got {}", loss.scale)));
        }
        for id in params {
            if self.params.get(id.0).and_then(Option::as_ref).is_none() {
                return Err(SolverError::InvalidBlock(format!("unknown parameter {}", id.0)));
            }
        }
        self.residuals.push(Some(ResidualBlock {
            cost,
            params: params.to_vec(),
            loss,
            weight,
            tag,
        }));
        Ok(ResidualId(self.residuals.len() - 1))
    }

    pub fn parameter(&self, id: ParamId) -> &Parameter {
        &self.block(id).value
    }

    pub fn set_parameter(&mut self, id: ParamId, value: Parameter) {
        self.block_mut(id).value = value;
    }

    pub fn has_parameter(&self, id: ParamId) -> bool {
        self.params.get(id.0).is_some_and(Option::is_some)
    }

    pub fn has_residual(&self, id: ResidualId) -> bool {
        self.residuals.get(id.0).is_some_and(Option::is_some)
    }

    pub fn block(&self, id: ParamId) -> &ParameterBlock {
        self.params[id.0].as_ref().expect("parameter was removed")
    }

    fn block_mut(&mut self, id: ParamId) -> &mut ParameterBlock {
        self.params[id.0].as_mut().expect("parameter was removed")
    }

    pub fn residual(&self, id: ResidualId) -> &ResidualBlock {
        self.residuals[id.0].as_ref().expect("residual was removed")
    }

    pub fn residual_mut(&mut self, id: ResidualId) -> &mut ResidualBlock {
        self.residuals[id.0].as_mut().expect("residual was removed")
    }

    pub fn remove_residual(&mut self, id: ResidualId) {
        self.residuals[id.0] = None;
    }

    pub fn parameter_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn residual_ids(&self) -> impl Iterator<Item = ResidualId> + '_ {
        self.residuals
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_some())
            .map(|(i, _)| ResidualId(i))
    }

    pub fn num_residuals(&self) -> usize {
        self.residuals.iter().filter(|r| r.is_some()).count()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().filter(|r| r.is_some()).count()
    }

    /// Removes every parameter block no residual refers to; returns their ids.
    pub fn remove_orphan_parameters(&mut self) -> Vec<ParamId> {
        let mut used = vec![false; self.params.len()];
        for r in self.residuals.iter().flatten() {
            for p in &r.params {
                used[p.0] = true;
            }
        }
        let mut removed = Vec::new();
        for (i, slot) in self.params.iter_mut().enumerate() {
            if slot.is_some() && !used[i] {
                *slot = None;
                removed.push(ParamId(i));
            }
        }
        removed
    }

    /// Raw residual vector of one block at the current parameters.
    pub fn evaluate_residual(&self, id: ResidualId) -> Result<DVector<f64>, SolverError> {
        let block = self.residual(id);
        let values: Vec<&Parameter> = block.params.iter().map(|p| self.parameter(*p)).collect();
        block.cost.evaluate(&values, None)
    }

    /// Total robustified cost `Σ wᵢ·ρᵢ(‖rᵢ‖²)`.
    pub fn cost(&self) -> Result<f64, SolverError> {
        let mut total = 0.0;
        for id in self.residual_ids() {
            let r = self.evaluate_residual(id)?;
            let block = self.residual(id);
            total += block.weight * block.loss.evaluate(r.norm_squared())[0];
        }
        Ok(total)
    }

    pub(crate) fn params_slice(&self) -> &[Option<ParameterBlock>] {
        &self.params
    }

    pub(crate) fn params_slice_mut(&mut self) -> &mut [Option<ParameterBlock>] {
        &mut self.params
    }

    pub(crate) fn residual_slots(&self) -> &[Option<ResidualBlock>] {
        &self.residuals
    }
}
