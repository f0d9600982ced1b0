use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::Corrector;
use super::problem::{Parameter, ParameterBlock, Problem};
use super::SolverError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when `max |Jᵀr| ≤ gradient_tolerance`.
    pub gradient_tolerance: f64,
    /// Stop when `‖δ‖ ≤ parameter_tolerance · (‖x‖ + parameter_tolerance)`.
    pub parameter_tolerance: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_lambda: f64,
    #[serde(skip)]
    pub time_bound: Option<Duration>,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-12,
            parameter_tolerance: 1e-12,
            cost_tolerance: 1e-12,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 2.0,
            max_lambda: 1e16,
            time_bound: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ZeroCost,
    GradientTolerance,
    ParameterTolerance,
    CostTolerance,
    /// Damping hit `max_lambda` without finding a cost decrease.
    NoProgress,
    MaxIterations,
    TimeBound,
}

impl Termination {
    pub fn is_converged(self) -> bool {
        !matches!(self, Termination::MaxIterations | Termination::TimeBound)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub residuals: usize,
    pub accepted: bool,
}

impl std::fmt::Display for IterationRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:.6e} {:.3e} {} {}",
            self.iteration,
            self.cost,
            self.lambda,
            self.residuals,
            if self.accepted { "accept" } else { "reject" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub log: Vec<IterationRecord>,
}

impl SolverSummary {
    /// Diagnostic log, one `iteration cost lambda residual_count status` line per iteration.
    pub fn log_text(&self) -> String {
        let mut out = String::from("# iteration cost lambda residuals status\n");
        for rec in &self.log {
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

/// Where a parameter block lands in the normal equations.
#[derive(Debug, Clone, Copy)]
enum Slot {
    Reduced { offset: usize, dim: usize },
    Eliminated { index: usize, dim: usize },
}

struct Layout {
    slots: Vec<Option<Slot>>,
    reduced_dim: usize,
    eliminated: Vec<usize>,
    lifts: Vec<Option<DMatrix<f64>>>,
}

impl Layout {
    /// Vector blocks whose residuals never touch another such block are
    /// eliminated through a block-diagonal Schur complement.
    fn build(problem: &Problem) -> Layout {
        let params = problem.params_slice();
        let mut candidate: Vec<bool> = params
            .iter()
            .map(|b| {
                b.as_ref().is_some_and(|b| {
                    !b.constant && matches!(b.value, Parameter::Vector(_))
                })
            })
            .collect();
        for r in problem.residual_slots().iter().flatten() {
            let hits: Vec<usize> = r.params.iter().map(|p| p.0).filter(|&p| candidate[p]).collect();
            let mut unique = hits.clone();
            unique.sort_unstable();
            unique.dedup();
            if unique.len() > 1 || hits.len() > unique.len() {
                for p in unique {
                    candidate[p] = false;
                }
            }
        }

        let mut slots = vec![None; params.len()];
        let mut lifts = vec![None; params.len()];
        let mut reduced_dim = 0;
        let mut eliminated = Vec::new();
        for (i, block) in params.iter().enumerate() {
            let Some(block) = block else { continue };
            if block.constant {
                continue;
            }
            let dim = block.local_dim();
            if candidate[i] {
                slots[i] = Some(Slot::Eliminated {
                    index: eliminated.len(),
                    dim,
                });
                eliminated.push(i);
            } else {
                slots[i] = Some(Slot::Reduced {
                    offset: reduced_dim,
                    dim,
                });
                reduced_dim += dim;
            }
            lifts[i] = block.lift();
        }
        Layout {
            slots,
            reduced_dim,
            eliminated,
            lifts,
        }
    }
}

/// Corrected residual and local Jacobians of one block.
struct BlockLinearization {
    residual: DVector<f64>,
    jacobians: Vec<(usize, DMatrix<f64>)>,
}

struct Linearization {
    cost: f64,
    gradient_max: f64,
    reduced_gradient: DVector<f64>,
    reduced_hessian: DMatrix<f64>,
    elim_gradient: Vec<DVector<f64>>,
    elim_hessian: Vec<DMatrix<f64>>,
    coupling: Vec<DMatrix<f64>>,
}

fn linearize(problem: &Problem, layout: &Layout) -> Result<Linearization, SolverError> {
    let params = problem.params_slice();
    let slots: Vec<_> = problem.residual_slots().iter().flatten().collect();

    let evaluated: Vec<Result<(f64, BlockLinearization), SolverError>> = slots
        .par_iter()
        .map(|block| {
            let values: Vec<&Parameter> = block
                .params
                .iter()
                .map(|p| &params[p.0].as_ref().expect("live parameter").value)
                .collect();
            let mut jacs: Vec<DMatrix<f64>> = values
                .iter()
                .map(|v| DMatrix::zeros(block.cost.residual_dim(), v.jacobian_dim()))
                .collect();
            let raw = block.cost.evaluate(&values, Some(&mut jacs))?;
            let sq = raw.norm_squared();
            let rho = block.loss.evaluate(sq);
            let corrector = Corrector::new(sq, rho);
            let sqrt_w = block.weight.sqrt();
            let mut jacobians = Vec::new();
            for (pid, mut j) in block.params.iter().zip(jacs) {
                if layout.slots[pid.0].is_none() {
                    continue;
                }
                corrector.correct_jacobian(&raw, &mut j);
                j *= sqrt_w;
                let j = match &layout.lifts[pid.0] {
                    Some(lift) => j * lift,
                    None => j,
                };
                jacobians.push((pid.0, j));
            }
            let mut residual = raw;
            corrector.correct_residual(&mut residual);
            residual *= sqrt_w;
            Ok((block.weight * rho[0], BlockLinearization { residual, jacobians }))
        })
        .collect();

    let nc = layout.reduced_dim;
    let mut lin = Linearization {
        cost: 0.0,
        gradient_max: 0.0,
        reduced_gradient: DVector::zeros(nc),
        reduced_hessian: DMatrix::zeros(nc, nc),
        elim_gradient: Vec::with_capacity(layout.eliminated.len()),
        elim_hessian: Vec::with_capacity(layout.eliminated.len()),
        coupling: Vec::with_capacity(layout.eliminated.len()),
    };
    for &p in &layout.eliminated {
        let Some(Slot::Eliminated { dim, .. }) = layout.slots[p] else { unreachable!() };
        lin.elim_gradient.push(DVector::zeros(dim));
        lin.elim_hessian.push(DMatrix::zeros(dim, dim));
        lin.coupling.push(DMatrix::zeros(nc, dim));
    }

    for item in evaluated {
        let (cost, block) = item?;
        if !cost.is_finite() {
            return Err(SolverError::NumericalFailure("non-finite residual".into()));
        }
        lin.cost += cost;
        for (a, (pa, ja)) in block.jacobians.iter().enumerate() {
            let ga = ja.transpose() * &block.residual;
            match layout.slots[*pa].expect("active") {
                Slot::Reduced { offset, dim } => {
                    let mut g = lin.reduced_gradient.rows_mut(offset, dim);
                    g += &ga;
                }
                Slot::Eliminated { index, .. } => lin.elim_gradient[index] += &ga,
            }
            for (b, (pb, jb)) in block.jacobians.iter().enumerate().skip(a) {
                let h = ja.transpose() * jb;
                match (layout.slots[*pa].unwrap(), layout.slots[*pb].unwrap()) {
                    (Slot::Reduced { offset: oa, dim: da }, Slot::Reduced { offset: ob, dim: db }) => {
                        let mut view = lin.reduced_hessian.view_mut((oa, ob), (da, db));
                        view += &h;
                        if a != b {
                            let mut view_t = lin.reduced_hessian.view_mut((ob, oa), (db, da));
                            view_t += h.transpose();
                        }
                    }
                    (Slot::Reduced { offset, dim }, Slot::Eliminated { index, .. }) => {
                        let mut view = lin.coupling[index].rows_mut(offset, dim);
                        view += &h;
                    }
                    (Slot::Eliminated { index, .. }, Slot::Reduced { offset, dim }) => {
                        let mut view = lin.coupling[index].rows_mut(offset, dim);
                        view += h.transpose();
                    }
                    (Slot::Eliminated { index: ia, .. }, Slot::Eliminated { index: ib, .. }) => {
                        debug_assert_eq!(ia, ib);
                        lin.elim_hessian[ia] += &h;
                    }
                }
            }
        }
    }
    let mut gmax = lin.reduced_gradient.amax();
    for g in &lin.elim_gradient {
        gmax = gmax.max(g.amax());
    }
    lin.gradient_max = gmax;
    Ok(lin)
}

fn damp(h: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut out = h.clone();
    for i in 0..h.nrows() {
        out[(i, i)] += lambda * h[(i, i)].clamp(1e-6, 1e32);
    }
    out
}

/// Solves the damped normal equations; `None` when a factorisation fails.
fn solve_step(lin: &Linearization, lambda: f64) -> Option<(DVector<f64>, Vec<DVector<f64>>)> {
    let nc = lin.reduced_gradient.len();
    let mut schur = damp(&lin.reduced_hessian, lambda);
    let mut rhs = -&lin.reduced_gradient;
    let mut inverses = Vec::with_capacity(lin.elim_hessian.len());
    for ((c, g), b) in lin.elim_hessian.iter().zip(&lin.elim_gradient).zip(&lin.coupling) {
        let cinv = damp(c, lambda).cholesky()?.inverse();
        if nc > 0 {
            let b_cinv = b * &cinv;
            schur -= &b_cinv * b.transpose();
            rhs += &b_cinv * g;
        }
        inverses.push(cinv);
    }
    let delta_c = if nc > 0 {
        schur.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let delta_e = inverses
        .iter()
        .zip(&lin.elim_gradient)
        .zip(&lin.coupling)
        .map(|((cinv, g), b)| cinv * (-g - b.transpose() * &delta_c))
        .collect();
    if !delta_c.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((delta_c, delta_e))
}

fn state_norm(problem: &Problem) -> f64 {
    let mut sq = 0.0;
    for block in problem.params_slice().iter().flatten() {
        if block.constant {
            continue;
        }
        sq += match &block.value {
            Parameter::Vector(v) => v.norm_squared(),
            Parameter::Pose(p) => p.translation.norm_squared() + p.rotation.scaled_axis().norm_squared(),
        };
    }
    sq.sqrt()
}

fn apply_step(
    blocks: &[Option<ParameterBlock>],
    layout: &Layout,
    delta_c: &DVector<f64>,
    delta_e: &[DVector<f64>],
) -> Vec<Option<Parameter>> {
    blocks
        .iter()
        .enumerate()
        .map(|(i, block)| {
            let block = block.as_ref()?;
            match layout.slots[i]? {
                Slot::Reduced { offset, dim } => Some(block.retract(delta_c.rows(offset, dim).as_slice())),
                Slot::Eliminated { index, .. } => Some(block.retract(delta_e[index].as_slice())),
            }
        })
        .collect()
}

/// Levenberg–Marquardt with Marquardt diagonal damping.
///
/// The solver keeps its damping and convergence state between calls to
/// [`LevenbergMarquardt::run`], so an optimisation can be split into stages
/// without changing its iterates. Call [`LevenbergMarquardt::problem_changed`]
/// after editing the problem between stages.
#[derive(Debug, Clone)]
pub struct LevenbergMarquardt {
    options: LmOptions,
    lambda: f64,
    iterations: usize,
    converged: Option<Termination>,
    initial_cost: Option<f64>,
    last_cost: f64,
    log: Vec<IterationRecord>,
}

impl LevenbergMarquardt {
    pub fn new(options: LmOptions) -> Self {
        Self {
            lambda: options.initial_lambda,
            options,
            iterations: 0,
            converged: None,
            initial_cost: None,
            last_cost: f64::NAN,
            log: Vec::new(),
        }
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn problem_changed(&mut self) {
        self.converged = None;
    }

    /// Runs at most `max_iterations` iterations, or until `deadline`.
    pub fn run(
        &mut self,
        problem: &mut Problem,
        max_iterations: usize,
        deadline: Option<Instant>,
    ) -> Result<Termination, SolverError> {
        if let Some(t) = self.converged {
            return Ok(t);
        }
        if problem.num_residuals() == 0 {
            return Err(SolverError::EmptyProblem);
        }
        let layout = Layout::build(problem);
        let mut lin = linearize(problem, &layout)?;
        self.initial_cost.get_or_insert(lin.cost);
        self.last_cost = lin.cost;
        let residual_count = problem.num_residuals();
        let mut done = 0;

        loop {
            if lin.cost <= 1e-300 {
                return Ok(self.finish(Termination::ZeroCost));
            }
            if lin.gradient_max <= self.options.gradient_tolerance {
                return Ok(self.finish(Termination::GradientTolerance));
            }
            if done >= max_iterations {
                return Ok(Termination::MaxIterations);
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Ok(Termination::TimeBound);
            }
            done += 1;
            self.iterations += 1;

            let Some((delta_c, delta_e)) = solve_step(&lin, self.lambda) else {
                self.lambda *= self.options.lambda_up;
                if self.lambda > self.options.max_lambda {
                    return Err(SolverError::NumericalFailure(
                        "normal equations singular at maximum damping".into(),
                    ));
                }
                continue;
            };

            let step_sq = delta_c.norm_squared() + delta_e.iter().map(|d| d.norm_squared()).sum::<f64>();
            let tol = self.options.parameter_tolerance;
            if step_sq.sqrt() <= tol * (state_norm(problem) + tol) {
                return Ok(self.finish(Termination::ParameterTolerance));
            }

            let candidate = apply_step(problem.params_slice(), &layout, &delta_c, &delta_e);
            let previous: Vec<Option<Parameter>> = candidate
                .iter()
                .zip(problem.params_slice())
                .map(|(c, b)| c.as_ref().map(|_| b.as_ref().unwrap().value.clone()))
                .collect();
            swap_values(problem, candidate);
            let new_cost = match problem.cost() {
                Ok(c) if c.is_finite() => c,
                _ => f64::INFINITY,
            };

            if new_cost < lin.cost {
                let relative = (lin.cost - new_cost) / lin.cost;
                self.lambda = (self.lambda / self.options.lambda_down).max(1e-300);
                self.last_cost = new_cost;
                self.record(new_cost, residual_count, true);
                lin = linearize(problem, &layout)?;
                if relative <= self.options.cost_tolerance {
                    return Ok(self.finish(Termination::CostTolerance));
                }
            } else {
                swap_values(problem, previous);
                self.record(lin.cost, residual_count, false);
                self.lambda *= self.options.lambda_up;
                if self.lambda > self.options.max_lambda {
                    return Ok(self.finish(Termination::NoProgress));
                }
            }
        }
    }

    fn finish(&mut self, t: Termination) -> Termination {
        self.converged = Some(t);
        t
    }

    fn record(&mut self, cost: f64, residuals: usize, accepted: bool) {
        let rec = IterationRecord {
            iteration: self.iterations,
            cost,
            lambda: self.lambda,
            residuals,
            accepted,
        };
        log::trace!("lm {rec}");
        self.log.push(rec);
    }

    pub fn summary(&self, termination: Termination) -> SolverSummary {
        SolverSummary {
            initial_cost: self.initial_cost.unwrap_or(f64::NAN),
            final_cost: self.last_cost,
            iterations: self.iterations,
            termination,
            log: self.log.clone(),
        }
    }
}

fn swap_values(problem: &mut Problem, values: Vec<Option<Parameter>>) {
    for (slot, value) in problem.params_slice_mut().iter_mut().zip(values) {
        if let (Some(block), Some(v)) = (slot.as_mut(), value) {
            block.value = v;
        }
    }
}

/// Minimises the problem in place with Levenberg–Marquardt.
pub fn solve_lm(problem: &mut Problem, options: &LmOptions) -> Result<SolverSummary, SolverError> {
    let mut lm = LevenbergMarquardt::new(*options);
    let deadline = options.time_bound.map(|d| Instant::now() + d);
    let t = lm.run(problem, options.max_iterations, deadline)?;
    Ok(lm.summary(t))
}
