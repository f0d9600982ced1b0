use nalgebra::{DMatrix, DVector, Vector6};

use super::problem::{CostFunction, Parameter};
use super::SolverError;

/// Central-difference Jacobians of a cost function on the same tangent
/// charts the analytic Jacobians use.
pub fn finite_difference_jacobians(
    cost: &dyn CostFunction,
    params: &[&Parameter],
    step: f64,
) -> Result<Vec<DMatrix<f64>>, SolverError> {
    let m = cost.residual_dim();
    let mut out = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let n = p.jacobian_dim();
        let mut jac = DMatrix::zeros(m, n);
        for k in 0..n {
            let plus = perturb(p, k, step);
            let minus = perturb(p, k, -step);
            let eval = |value: &Parameter| -> Result<DVector<f64>, SolverError> {
                let mut shifted: Vec<&Parameter> = params.to_vec();
                shifted[i] = value;
                cost.evaluate(&shifted, None)
            };
            let col = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            jac.set_column(k, &col);
        }
        out.push(jac);
    }
    Ok(out)
}

fn perturb(p: &Parameter, k: usize, h: f64) -> Parameter {
    match p {
        Parameter::Vector(v) => {
            let mut v = v.clone();
            v[k] += h;
            Parameter::Vector(v)
        }
        Parameter::Pose(pose) => {
            let mut d = Vector6::zeros();
            d[k] = h;
            Parameter::Pose(pose.retract(&d))
        }
    }
}

/// Largest entry-wise relative difference `|a − b| / max(1, |b|)`.
pub fn max_relative_difference(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Analytic Jacobians of `cost` at `params`.
pub fn analytic_jacobians(cost: &dyn CostFunction, params: &[&Parameter]) -> Result<Vec<DMatrix<f64>>, SolverError> {
    let mut jacs: Vec<DMatrix<f64>> = params
        .iter()
        .map(|p| DMatrix::zeros(cost.residual_dim(), p.jacobian_dim()))
        .collect();
    cost.evaluate(params, Some(&mut jacs))?;
    Ok(jacs)
}
