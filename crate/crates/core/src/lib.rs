pub mod geometry;
pub mod solver;
pub mod depth;
pub mod tracking;
pub mod frame2frame;
pub mod backend;
pub mod pipeline;

pub use geometry::{CameraIntrinsics, ExtrinsicCalibration, GeometryError, Pose, Vec2, Vec3};
pub use pipeline::{run_pipeline, Mode, PipelineConfig, PipelineError, RunOutput, DatasetSequence};
