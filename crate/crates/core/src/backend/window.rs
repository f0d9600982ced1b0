use std::collections::HashMap;

use crate::geometry::CameraIntrinsics;
use crate::solver::{
    solve_trimmed, LmOptions, ParamId, Problem, ResidualTag, RobustLoss, SolverError, TrimConfig, TrimmedSummary,
};

use super::costs::{translation_length, DepthCost, ReprojectionCost, ScaleCost};
use super::{Keyframe, Landmark, WindowConfig};

/// Pre-optimisation length between the two oldest window poses.
pub fn capture_scale(keyframes: &[Keyframe], cfg: &WindowConfig) -> Option<f64> {
    (keyframes.len() >= 2).then(|| translation_length(&keyframes[0].pose, &keyframes[1].pose, cfg.squared_scale))
}

#[derive(Debug, Clone)]
pub struct WindowSummary {
    pub keyframe_ids: Vec<usize>,
    pub landmarks: usize,
    pub reprojection_blocks: usize,
    pub depth_blocks: usize,
    pub removed_landmarks: usize,
    /// Weights after rescaling: `[w0, w1, w2]`.
    pub weights: [f64; 3],
    pub solver: TrimmedSummary,
}

impl std::fmt::Display for WindowSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "window {:?} landmarks {} reproj {} depth {} trimmed {} removed_landmarks {} cost {:.6e} -> {:.6e} iters {} {:?}",
            self.keyframe_ids,
            self.landmarks,
            self.reprojection_blocks,
            self.depth_blocks,
            self.solver.removed_residuals.len(),
            self.removed_landmarks,
            self.solver.solver.initial_cost,
            self.solver.solver.final_cost,
            self.solver.solver.iterations,
            self.solver.solver.termination,
        )
    }
}

/// Mean per-block cost of one residual class at the current values, unweighted.
fn mean_class_cost(problem: &Problem, tag: ResidualTag) -> Result<Option<f64>, SolverError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for id in problem.residual_ids() {
        let b = problem.residual(id);
        if b.tag == tag {
            let r = problem.evaluate_residual(id)?;
            sum += b.loss.evaluate(r.norm_squared())[0] * b.weight;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Jointly refines window poses and landmarks.
///
/// `keyframes` are oldest first; the oldest pose is held constant and the
/// length between the two oldest poses is tied to `scale_target` (from
/// [`capture_scale`]). Landmarks whose residuals are all trimmed are removed
/// from `landmarks`; the rest are updated in place.
pub fn build_and_solve_window(
    keyframes: &mut [Keyframe],
    landmarks: &mut Vec<Landmark>,
    scale_target: Option<f64>,
    intrinsics: &CameraIntrinsics,
    cfg: &WindowConfig,
    trim: &TrimConfig,
    lm: &LmOptions,
) -> Result<WindowSummary, SolverError> {
    if keyframes.len() < 2 || landmarks.is_empty() {
        return Err(SolverError::EmptyProblem);
    }
    let mut problem = Problem::new();
    let mut pose_ids: HashMap<usize, ParamId> = HashMap::new();
    let pose_params: Vec<ParamId> = keyframes
        .iter()
        .map(|k| {
            let id = problem.add_pose(k.pose);
            pose_ids.insert(k.frame_id, id);
            id
        })
        .collect();
    problem.set_constant(pose_params[0], true);

    let reproj_loss = RobustLoss::cauchy(cfg.reprojection_loss_scale);
    let depth_loss = RobustLoss::cauchy(cfg.depth_loss_scale);
    let mut point_ids = Vec::with_capacity(landmarks.len());
    let mut depth_blocks = Vec::new();
    let mut reprojection_blocks = 0;
    for l in landmarks.iter() {
        let pid = problem.add_point(l.position);
        point_ids.push(pid);
        for o in &l.observations {
            let Some(&pose) = pose_ids.get(&o.frame_id) else { continue };
            problem.add_residual(
                Box::new(ReprojectionCost {
                    observed: o.pixel,
                    intrinsics: *intrinsics,
                }),
                &[pose, pid],
                reproj_loss,
                cfg.w1 * l.weight,
                ResidualTag::Reprojection,
            )?;
            reprojection_blocks += 1;
            if let Some(d) = o.depth {
                depth_blocks.push((
                    problem.add_residual(
                        Box::new(DepthCost { measured: d }),
                        &[pose, pid],
                        depth_loss,
                        cfg.w2 * l.weight,
                        ResidualTag::Depth,
                    )?,
                    l.weight,
                ));
            }
        }
    }

    let mut w2 = cfg.w2;
    if cfg.auto_rescale && !depth_blocks.is_empty() {
        if let (Some(rep), Some(dep)) = (
            mean_class_cost(&problem, ResidualTag::Reprojection)?,
            mean_class_cost(&problem, ResidualTag::Depth)?,
        ) {
            if rep > 1e-12 && dep > 1e-12 {
                let ratio = dep / rep;
                let target = ratio.clamp(0.5, 2.0);
                if target != ratio {
                    let factor = target / ratio;
                    w2 *= factor;
                    for (id, lw) in &depth_blocks {
                        problem.residual_mut(*id).weight = w2 * lw;
                    }
                }
            }
        }
    }

    if let Some(s) = scale_target {
        problem.add_residual(
            Box::new(ScaleCost {
                target: s,
                squared: cfg.squared_scale,
            }),
            &[pose_params[0], pose_params[1]],
            RobustLoss::TRIVIAL,
            cfg.w0,
            ResidualTag::ScaleRegularizer,
        )?;
    }

    let summary = solve_trimmed(&mut problem, trim, lm)?;

    for (k, id) in keyframes.iter_mut().zip(&pose_params) {
        k.pose = *problem.parameter(*id).as_pose();
    }
    let before = landmarks.len();
    let mut kept = Vec::with_capacity(before);
    for (mut l, pid) in std::mem::take(landmarks).into_iter().zip(point_ids) {
        if problem.has_parameter(pid) {
            l.position = problem.parameter(pid).as_point();
            kept.push(l);
        }
    }
    *landmarks = kept;
    Ok(WindowSummary {
        keyframe_ids: keyframes.iter().map(|k| k.frame_id).collect(),
        landmarks: before,
        reprojection_blocks,
        depth_blocks: depth_blocks.len(),
        removed_landmarks: before - landmarks.len(),
        weights: [cfg.w0, cfg.w1, w2],
        solver: summary,
    })
}
