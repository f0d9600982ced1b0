use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::lm::{LevenbergMarquardt, LmOptions, SolverSummary};
use super::problem::{ParamId, Problem, ResidualId, ResidualTag};
use super::SolverError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrimConfig {
    /// LM iterations to run before each trimming round.
    pub steps: Vec<usize>,
    /// Percentage of depth and of reprojection blocks dropped per round.
    pub rejection_percent: f64,
    /// Wall-clock budget for the whole solve, in milliseconds; `None` disables it.
    /// Written as `0` in configuration files.
    #[serde(with = "zero_is_none")]
    pub time_bound_ms: Option<u64>,
    /// Iteration cap for the final optimisation after the last round.
    pub final_iterations: usize,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self {
            steps: vec![5, 5],
            rejection_percent: 10.0,
            time_bound_ms: Some(100),
            final_iterations: 50,
        }
    }
}

mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        Ok(Some(u64::deserialize(d)?).filter(|&v| v > 0))
    }
}

impl TrimConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.steps.is_empty() {
            return Err(SolverError::InvalidConfig("trim steps must not be empty".into()));
        }
        if !(0.0..50.0).contains(&self.rejection_percent) {
            return Err(SolverError::InvalidConfig(format!(
                "rejection percent must lie in [0, 50), got {}",
                self.rejection_percent
            )));
        }
        Ok(())
    }

    /// Total LM iteration budget, for comparing against a plain solve.
    pub fn total_iterations(&self) -> usize {
        self.steps.iter().sum::<usize>() + self.final_iterations
    }
}

#[derive(Debug, Clone)]
pub struct TrimmedSummary {
    pub solver: SolverSummary,
    pub removed_residuals: Vec<ResidualId>,
    pub removed_parameters: Vec<ParamId>,
}

const TRIMMED_TAGS: [ResidualTag; 2] = [ResidualTag::Depth, ResidualTag::Reprojection];

/// Ids of the `⌊percent · n⌋` largest raw-norm blocks of `tag`, ties to the lower id.
pub fn largest_residuals(
    problem: &Problem,
    tag: ResidualTag,
    percent: f64,
) -> Result<Vec<ResidualId>, SolverError> {
    let mut scored = Vec::new();
    for id in problem.residual_ids() {
        if problem.residual(id).tag == tag {
            scored.push((problem.evaluate_residual(id)?.norm(), id));
        }
    }
    let count = (percent / 100.0 * scored.len() as f64).floor() as usize;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(count).map(|(_, id)| id).collect())
}

/// Interleaves LM stages with removal of the worst depth and reprojection
/// blocks, dropping parameters that lose all their residuals, then optimises
/// to convergence or the time bound.
pub fn solve_trimmed(
    problem: &mut Problem,
    trim: &TrimConfig,
    options: &LmOptions,
) -> Result<TrimmedSummary, SolverError> {
    trim.validate()?;
    let start = Instant::now();
    let deadline = trim.time_bound_ms.map(|ms| start + Duration::from_millis(ms));
    let mut lm = LevenbergMarquardt::new(*options);
    let mut removed_residuals = Vec::new();
    let mut removed_parameters = Vec::new();

    for &steps in &trim.steps {
        lm.run(problem, steps, None)?;
        let mut round = Vec::new();
        for tag in TRIMMED_TAGS {
            round.extend(largest_residuals(problem, tag, trim.rejection_percent)?);
        }
        for id in &round {
            problem.remove_residual(*id);
        }
        let orphans = problem.remove_orphan_parameters();
        if !round.is_empty() || !orphans.is_empty() {
            log::debug!("trim round removed {} residuals, {} parameters", round.len(), orphans.len());
            lm.problem_changed();
        }
        removed_residuals.extend(round);
        removed_parameters.extend(orphans);
        if problem.num_residuals() == 0 {
            return Err(SolverError::EmptyProblem);
        }
    }
    let termination = lm.run(problem, trim.final_iterations, deadline)?;
    Ok(TrimmedSummary {
        solver: lm.summary(termination),
        removed_residuals,
        removed_parameters,
    })
}
