//! Keyframe selection, landmark selection and windowed bundle adjustment
//! with LIDAR depth and scale-regularizer terms.

mod costs;
mod keyframes;
mod landmarks;
mod window;

pub use costs::{translation_length, DepthCost, ReprojectionCost, ScaleCost};
pub use keyframes::{
    classify_frame, select_keyframes, shared_counts, window_length, FrameClass, Keyframe, KeyframeCategory,
    KeyframeSelector,
};
pub use landmarks::{
    assign_bin, flow, passes_cheirality, select_landmarks, voxel_filter, Bin, Landmark, LandmarkCandidate,
    LandmarkObservation,
};
pub use window::{build_and_solve_window, capture_scale, WindowSummary};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{backproject, triangulate, CameraIntrinsics, Pose, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Seconds between keyframes on straight motion.
    pub keyframe_interval: f64,
    /// Frame-to-frame rotation that makes a frame required, radians.
    pub turn_angle_threshold: f64,
    /// Below this mean optical flow no keyframe is taken, pixels.
    pub min_mean_flow: f64,
    pub min_connectivity: usize,
    pub window_min: usize,
    pub window_max: usize,
    /// Upper depth of the near bin, metres.
    pub near_max: f64,
    /// Upper depth of the middle bin, metres.
    pub middle_max: f64,
    pub quota_near: usize,
    pub quota_middle: usize,
    pub quota_far: usize,
    pub voxel_near: f64,
    pub voxel_middle: f64,
    pub vegetation_weight: f64,
    /// Scale regularizer weight.
    pub w0: f64,
    /// Reprojection weight.
    pub w1: f64,
    /// Depth weight.
    pub w2: f64,
    /// Adjust `w2` so the initial mean depth and reprojection costs are within a factor of 2.
    pub auto_rescale: bool,
    pub reprojection_loss_scale: f64,
    pub depth_loss_scale: f64,
    /// Regularize the squared translation length rather than the length.
    pub squared_scale: bool,
    pub seed: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            keyframe_interval: 0.3,
            turn_angle_threshold: 0.015,
            min_mean_flow: 2.0,
            min_connectivity: 10,
            window_min: 4,
            window_max: 10,
            near_max: 30.0,
            middle_max: 80.0,
            quota_near: 100,
            quota_middle: 100,
            quota_far: 100,
            voxel_near: 0.5,
            voxel_middle: 2.0,
            vegetation_weight: 0.9,
            w0: 10.0,
            w1: 1.0,
            w2: 5.0,
            auto_rescale: true,
            reprojection_loss_scale: 1.0,
            depth_loss_scale: 0.3,
            squared_scale: true,
            seed: 0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_min > self.window_max {
            return Err(format!(
                "window.window_min ({}) exceeds window.window_max ({})",
                self.window_min, self.window_max
            ));
        }
        if self.window_max < 2 {
            return Err("window.window_max must be at least 2".into());
        }
        if !(0.0 < self.near_max && self.near_max < self.middle_max) {
            return Err("window bin boundaries must be positive and increasing".into());
        }
        if !(self.vegetation_weight > 0.0 && self.vegetation_weight <= 1.0) {
            return Err("window.vegetation_weight must lie in (0, 1]".into());
        }
        for (name, v) in [
            ("w0", self.w0),
            ("w1", self.w1),
            ("w2", self.w2),
            ("reprojection_loss_scale", self.reprojection_loss_scale),
            ("depth_loss_scale", self.depth_loss_scale),
            ("keyframe_interval", self.keyframe_interval),
        ] {
            if !(v > 0.0) {
                return Err(format!("window.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Initial world position for a track: back-projected from the newest
/// observation with depth, otherwise triangulated from the two observations
/// with the widest baseline.
pub fn initial_position(
    observations: &[LandmarkObservation],
    poses: &HashMap<usize, Pose>,
    intrinsics: &CameraIntrinsics,
) -> Option<Vec3> {
    for o in observations.iter().rev() {
        if let (Some(d), Some(p)) = (o.depth, poses.get(&o.frame_id)) {
            return Some(p.inverse().transform_point(&backproject(&o.pixel, d, intrinsics)));
        }
    }
    let posed: Vec<(&LandmarkObservation, &Pose)> = observations
        .iter()
        .filter_map(|o| poses.get(&o.frame_id).map(|p| (o, p)))
        .collect();
    let (first, last) = (posed.first()?, posed.last()?);
    if posed.len() < 2 {
        return None;
    }
    triangulate(&first.0.pixel, &last.0.pixel, first.1, last.1, intrinsics).ok()
}

#[cfg(test)]
mod tests;
