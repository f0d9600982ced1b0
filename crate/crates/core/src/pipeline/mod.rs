//! Dataset ingestion, synthetic sequences, the odometry driver, trajectory
//! files and the KITTI error metric.

mod config;
mod dataset;
mod diagnostics;
mod metric;
mod run;
mod synthetic;
mod trajectory;

pub use config::{PipelineConfig, SemanticConfig};
pub use dataset::{
    load_kitti_sequence, parse_calibration, write_sequence, DatasetSequence, FrameBundle, FrameSource,
    KittiCalibration, KittiSource,
};
pub use diagnostics::{depth_diagnostics, write_depth_csv, FeatureDepthRow};
pub use metric::{kitti_metric, path_distances, write_report, write_report_to, ErrorReport, ErrorSummary, MetricError, SegmentError, SEGMENT_LENGTHS};
pub use run::{run_pipeline, FrameRecord, Mode, RunOutput};
pub use synthetic::{
    generate_scene, kitti_camera, kitti_extrinsics, LidarModel, PathSegment, SceneSpec, SurfaceKind, SyntheticScene,
    VehicleSpec,
};
pub use trajectory::{format_pose, parse_trajectory, read_trajectory, write_trajectory, write_trajectory_to};

use std::path::PathBuf;

use thiserror::Error;

use crate::depth::DepthError;
use crate::frame2frame::PriorError;
use crate::solver::SolverError;
use crate::tracking::TrackingError;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file or directory: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}:{line}: malformed calibration `{content}`: {message}", path.display())]
    MalformedCalibration {
        path: PathBuf,
        line: usize,
        content: String,
        message: String,
    },
    #[error("{location}: {message}")]
    Malformed { location: String, message: String },
    #[error("invalid synthetic scene: {0}")]
    InvalidScene(String),
    #[error("frame {0} is out of range")]
    FrameOutOfRange(usize),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error("motion prior: {0}")]
    Prior(#[from] PriorError),
    #[error("bundle adjustment: {0}")]
    Solver(#[from] SolverError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("frame {frame_id}: {source}")]
    Frame {
        frame_id: usize,
        #[source]
        source: FrameError,
    },
}
