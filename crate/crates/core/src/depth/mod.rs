//! One-shot depth for image features from a single LIDAR sweep.
//!
//! For each feature: gather projected LIDAR points in a pixel rectangle,
//! keep the nearest depth cluster, fit a plane through the largest triangle
//! of those points and intersect it with the feature's line of sight.
//! Road features use a taller rectangle, points near the global ground
//! plane and no depth clustering.

mod cloud;
mod plane;

pub use cloud::{project_cloud, read_text_cloud, read_velodyne_bin, write_velodyne_bin, ProjectedCloud, ProjectedPoint};
pub use plane::{
    extract_ground_plane, fit_plane_least_squares, fit_plane_max_triangle, intersect_ray_plane, triangle_area, Plane,
    RansacConfig, TriangleFit, EXHAUSTIVE_TRIANGLE_CAP,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{unproject_ray, CameraIntrinsics, ExtrinsicCalibration, Vec2, Vec3};

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("fewer than 3 LIDAR points in the neighbourhood")]
    NoNeighbors,
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("largest triangle area {area} below minimum")]
    DegenerateTriangle { area: f64 },
    #[error("line of sight parallel to plane")]
    ParallelRay,
    #[error("ground plane has {inliers} inliers out of {total} points")]
    InsufficientInliers { inliers: usize, total: usize },
    #[error("malformed point cloud: {0}")]
    MalformedCloud(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PartialEq for DepthError {
    fn eq(&self, other: &Self) -> bool {
        use DepthError::*;
        match (self, other) {
            (NoNeighbors, NoNeighbors) | (ParallelRay, ParallelRay) => true,
            (TooFewPoints(a), TooFewPoints(b)) => a == b,
            (DegenerateTriangle { area: a }, DegenerateTriangle { area: b }) => a == b,
            (InsufficientInliers { inliers: a, total: x }, InsufficientInliers { inliers: b, total: y }) => a == b && x == y,
            (MalformedCloud(a), MalformedCloud(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthConfig {
    /// Half extent of the neighbourhood rectangle, pixels (11 × 11 by default).
    pub roi_half_width: f64,
    pub roi_half_height: f64,
    /// Half extent for road features (11 × 31 by default).
    pub ground_roi_half_width: f64,
    pub ground_roi_half_height: f64,
    /// Depth histogram bin width, metres.
    pub histogram_bin_width: f64,
    /// A histogram bin with at least this many points is significant.
    pub significant_bin_count: usize,
    pub max_depth: f64,
    /// Largest accepted angle between line of sight and plane normal, degrees.
    pub max_incidence_angle_deg: f64,
    /// Same limit for road features, which are always seen at a shallow angle.
    pub max_incidence_angle_ground_deg: f64,
    pub min_triangle_area: f64,
    pub min_triangle_area_ground: f64,
    pub ground_ransac_threshold: f64,
    pub ground_ransac_iterations: usize,
    pub ground_min_inlier_ratio: f64,
    pub ground_max_tilt_deg: f64,
    /// Distance to the global ground plane within which points count as road, metres.
    pub ground_vicinity: f64,
    pub seed: u64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            roi_half_width: 5.0,
            roi_half_height: 5.0,
            ground_roi_half_width: 5.0,
            ground_roi_half_height: 15.0,
            histogram_bin_width: 0.3,
            significant_bin_count: 2,
            max_depth: 30.0,
            max_incidence_angle_deg: 70.0,
            max_incidence_angle_ground_deg: 88.0,
            min_triangle_area: 1e-4,
            min_triangle_area_ground: 1e-2,
            ground_ransac_threshold: 0.15,
            ground_ransac_iterations: 200,
            ground_min_inlier_ratio: 0.2,
            ground_max_tilt_deg: 30.0,
            ground_vicinity: 0.2,
            seed: 0,
        }
    }
}

impl DepthConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("roi_half_width", self.roi_half_width),
            ("roi_half_height", self.roi_half_height),
            ("ground_roi_half_width", self.ground_roi_half_width),
            ("ground_roi_half_height", self.ground_roi_half_height),
            ("histogram_bin_width", self.histogram_bin_width),
            ("max_depth", self.max_depth),
            ("max_incidence_angle_deg", self.max_incidence_angle_deg),
            ("max_incidence_angle_ground_deg", self.max_incidence_angle_ground_deg),
            ("min_triangle_area", self.min_triangle_area),
            ("min_triangle_area_ground", self.min_triangle_area_ground),
            ("ground_ransac_threshold", self.ground_ransac_threshold),
            ("ground_vicinity", self.ground_vicinity),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(format!("depth.{name} must be positive, got {v}"));
            }
        }
        if self.min_triangle_area_ground <= self.min_triangle_area {
            return Err("depth.min_triangle_area_ground must exceed depth.min_triangle_area".into());
        }
        Ok(())
    }

    fn ransac(&self) -> RansacConfig {
        RansacConfig {
            iterations: self.ground_ransac_iterations,
            threshold: self.ground_ransac_threshold,
            min_inlier_ratio: self.ground_min_inlier_ratio,
            max_tilt_deg: self.ground_max_tilt_deg,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthSource {
    ForegroundPlane,
    GroundPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthStatus {
    Valid,
    RejectedAngle,
    RejectedRange,
    RejectedDegenerate,
    NoNeighbors,
}

impl std::fmt::Display for DepthStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DepthStatus::Valid => "valid",
            DepthStatus::RejectedAngle => "rejected_angle",
            DepthStatus::RejectedRange => "rejected_range",
            DepthStatus::RejectedDegenerate => "rejected_degenerate",
            DepthStatus::NoNeighbors => "no_neighbors",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthEstimate {
    /// Camera-frame z of the feature, metres. Meaningful only when valid.
    pub depth: f64,
    pub plane_normal: Vec3,
    pub source: DepthSource,
    pub status: DepthStatus,
}

impl DepthEstimate {
    fn rejected(source: DepthSource, status: DepthStatus) -> Self {
        Self {
            depth: f64::NAN,
            plane_normal: Vec3::zeros(),
            source,
            status,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.status == DepthStatus::Valid
    }

    pub fn valid_depth(&self) -> Option<f64> {
        self.is_valid().then_some(self.depth)
    }
}

/// LIDAR points whose projection falls in the rectangle around `feature`.
pub fn select_neighborhood(
    cloud: &ProjectedCloud,
    feature: &Vec2,
    half_width: f64,
    half_height: f64,
) -> Result<Vec<ProjectedPoint>, DepthError> {
    let pts = cloud.query_rect(feature, half_width, half_height);
    if pts.len() < 3 {
        return Err(DepthError::NoNeighbors);
    }
    Ok(pts)
}

/// Keeps the nearest significant depth cluster of a neighbourhood.
///
/// Sorted depths are split wherever two neighbours lie more than
/// `bin_width` apart, i.e. at every empty stretch of the occupancy
/// histogram wider than one bin. The first cluster holding at least
/// `significant_count` points is returned; when none does, the nearest.
pub fn segment_foreground(points: &[ProjectedPoint], bin_width: f64, significant_count: usize) -> Vec<ProjectedPoint> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut depths: Vec<f64> = points.iter().map(|p| p.depth).collect();
    depths.sort_by(f64::total_cmp);
    let mut clusters = Vec::new();
    let mut lo = 0;
    for i in 1..=depths.len() {
        if i == depths.len() || depths[i] - depths[i - 1] > bin_width {
            clusters.push((lo, i));
            lo = i;
        }
    }
    let (a, b) = clusters
        .iter()
        .copied()
        .find(|(a, b)| b - a >= significant_count.max(1))
        .unwrap_or(clusters[0]);
    let (near, far) = (depths[a], depths[b - 1]);
    points
        .iter()
        .filter(|p| p.depth >= near && p.depth <= far)
        .copied()
        .collect()
}

fn incidence_ok(ray: &Vec3, normal: &Vec3, source: DepthSource, cfg: &DepthConfig) -> bool {
    let limit = match source {
        DepthSource::ForegroundPlane => cfg.max_incidence_angle_deg,
        DepthSource::GroundPlane => cfg.max_incidence_angle_ground_deg,
    };
    let cos = normal.dot(ray).abs().min(1.0);
    cos.acos().to_degrees() < limit
}

fn plane_depth(ray: &Vec3, fit: &TriangleFit, source: DepthSource, cfg: &DepthConfig) -> DepthEstimate {
    let depth = match intersect_ray_plane(ray, &fit.plane) {
        Ok(d) => d,
        Err(_) => return DepthEstimate::rejected(source, DepthStatus::RejectedAngle),
    };
    if !incidence_ok(ray, &fit.plane.normal, source, cfg) {
        return DepthEstimate::rejected(source, DepthStatus::RejectedAngle);
    }
    if !(depth > 0.0 && depth <= cfg.max_depth) {
        return DepthEstimate {
            depth,
            plane_normal: fit.plane.normal,
            source,
            status: DepthStatus::RejectedRange,
        };
    }
    DepthEstimate {
        depth,
        plane_normal: fit.plane.normal,
        source,
        status: DepthStatus::Valid,
    }
}

fn foreground_depth(feature: &Vec2, ray: &Vec3, cloud: &ProjectedCloud, cfg: &DepthConfig) -> DepthEstimate {
    let src = DepthSource::ForegroundPlane;
    let Ok(neighbors) = select_neighborhood(cloud, feature, cfg.roi_half_width, cfg.roi_half_height) else {
        return DepthEstimate::rejected(src, DepthStatus::NoNeighbors);
    };
    let seg = segment_foreground(&neighbors, cfg.histogram_bin_width, cfg.significant_bin_count);
    let xyz: Vec<Vec3> = seg.iter().map(|p| p.xyz).collect();
    match fit_plane_max_triangle(&xyz, cfg.min_triangle_area) {
        Ok(fit) => plane_depth(ray, &fit, src, cfg),
        Err(_) => DepthEstimate::rejected(src, DepthStatus::RejectedDegenerate),
    }
}

fn ground_depth(feature: &Vec2, ray: &Vec3, cloud: &ProjectedCloud, ground: &Plane, cfg: &DepthConfig) -> DepthEstimate {
    let src = DepthSource::GroundPlane;
    let near_ground: Vec<Vec3> = cloud
        .query_rect(feature, cfg.ground_roi_half_width, cfg.ground_roi_half_height)
        .into_iter()
        .filter(|p| ground.signed_distance(&p.xyz).abs() <= cfg.ground_vicinity)
        .map(|p| p.xyz)
        .collect();
    if near_ground.len() < 3 {
        return DepthEstimate::rejected(src, DepthStatus::NoNeighbors);
    }
    let fit = match fit_plane_max_triangle(&near_ground, cfg.min_triangle_area_ground) {
        Ok(fit) => fit,
        Err(_) => return DepthEstimate::rejected(src, DepthStatus::RejectedDegenerate),
    };
    let est = plane_depth(ray, &fit, src, cfg);
    if est.is_valid() {
        let hit = ray * (est.depth / ray.z);
        if ground.signed_distance(&hit).abs() > cfg.ground_vicinity {
            return DepthEstimate::rejected(src, DepthStatus::RejectedDegenerate);
        }
    }
    est
}

/// Depth of one feature from a projected sweep.
///
/// Road features (`is_ground`) need the global `ground` plane; without it
/// they are treated like any other feature.
pub fn estimate_depth(
    feature: &Vec2,
    is_ground: bool,
    cloud: &ProjectedCloud,
    ground: Option<&Plane>,
    intrinsics: &CameraIntrinsics,
    cfg: &DepthConfig,
) -> DepthEstimate {
    let ray = unproject_ray(feature, intrinsics);
    match (is_ground, ground) {
        (true, Some(g)) => ground_depth(feature, &ray, cloud, g, cfg),
        _ => foreground_depth(feature, &ray, cloud, cfg),
    }
}

/// Per-frame depth extraction state: the projected sweep and its ground plane.
#[derive(Debug, Clone)]
pub struct FrameDepth {
    pub cloud: ProjectedCloud,
    pub ground: Option<Plane>,
    intrinsics: CameraIntrinsics,
    cfg: DepthConfig,
}

impl FrameDepth {
    pub fn new(
        sweep: &[Vec3],
        calib: &ExtrinsicCalibration,
        intrinsics: &CameraIntrinsics,
        cfg: &DepthConfig,
    ) -> Self {
        let camera_frame: Vec<Vec3> = sweep.iter().map(|p| calib.lidar_to_camera.transform_point(p)).collect();
        let ground = extract_ground_plane(&camera_frame, &cfg.ransac()).ok();
        Self {
            cloud: project_cloud(sweep, calib, intrinsics),
            ground,
            intrinsics: *intrinsics,
            cfg: cfg.clone(),
        }
    }

    /// Whether the feature's line of sight meets the ground plane below the
    /// camera within the depth limit.
    pub fn ray_hits_ground(&self, feature: &Vec2) -> bool {
        let Some(g) = &self.ground else { return false };
        let ray = unproject_ray(feature, &self.intrinsics);
        // Ground below the camera: y grows downward in the camera frame.
        ray.y > 0.0
            && intersect_ray_plane(&ray, g).is_ok_and(|d| d > 0.0 && d <= self.cfg.max_depth)
    }

    /// Depth for a feature. `semantic_ground` is the caller's road label when
    /// one exists; otherwise road features are guessed from the ground ray
    /// test, and both paths run with the nearer valid result kept, since a
    /// facade in front of the road also passes that test.
    pub fn estimate(&self, feature: &Vec2, semantic_ground: Option<bool>) -> DepthEstimate {
        let run = |ground: bool| estimate_depth(feature, ground, &self.cloud, self.ground.as_ref(), &self.intrinsics, &self.cfg);
        match semantic_ground {
            Some(flag) => run(flag),
            None if self.ray_hits_ground(feature) => {
                let g = run(true);
                let f = run(false);
                match (g.is_valid(), f.is_valid()) {
                    (true, true) if f.depth < g.depth => f,
                    (true, _) => g,
                    (false, true) => f,
                    (false, false) => f,
                }
            }
            None => run(false),
        }
    }
}
