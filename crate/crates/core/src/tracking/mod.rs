//! Feature tracks, a basic corner tracker and semantic filtering of
//! observations on moving objects.

mod features;
mod semantic;
mod tracks;

pub use features::{corner_scores, detect_corners, reject_flow_outliers, track_features, track_points, GrayImage, Tracker, TrackerConfig};
pub use semantic::{erode, semantic_filter, ClassTable, SemanticImage, SemanticMask};
pub use tracks::{ingest_tracks, parse_tracks, write_tracks, FeatureTrack, Observation, SemanticLabel};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("{location}: {message}")]
    Parse { location: String, message: String },
    #[error("track {track_id}: frame {frame_id} is not after the previous observation")]
    NonIncreasingFrame { track_id: u64, frame_id: usize },
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
