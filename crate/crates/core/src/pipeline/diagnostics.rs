use std::io::Write;

use crate::depth::{DepthEstimate, FrameDepth};
use crate::geometry::Vec2;
use crate::tracking::{detect_corners, SemanticLabel, SemanticMask};

use super::dataset::DatasetSequence;
use super::{DatasetError, PipelineConfig, PipelineError};

/// Depth extraction outcome for one feature of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDepthRow {
    /// Track id, or the detection index when features come from the image.
    pub feature_id: u64,
    pub pixel: Vec2,
    pub label: SemanticLabel,
    pub ground: Option<bool>,
    /// Projected LIDAR points inside the feature's window.
    pub neighbors: usize,
    pub estimate: Option<DepthEstimate>,
}

/// Runs depth extraction on the features of a single frame: the track
/// observations when the sequence carries tracks, otherwise fresh corners.
pub fn depth_diagnostics(
    seq: &DatasetSequence,
    cfg: &PipelineConfig,
    frame_id: usize,
) -> Result<Vec<FeatureDepthRow>, PipelineError> {
    let at = |e: DatasetError| PipelineError::Frame {
        frame_id,
        source: e.into(),
    };
    if frame_id >= seq.len() {
        return Err(at(DatasetError::FrameOutOfRange(frame_id)));
    }
    let bundle = seq.frame(frame_id).map_err(at)?;
    let features: Vec<(u64, Vec2)> = match (&seq.tracks, &bundle.image) {
        (Some(tracks), _) => tracks
            .iter()
            .filter_map(|t| t.at(frame_id).map(|o| (t.track_id, o.pixel)))
            .collect(),
        (None, Some(img)) => detect_corners(img, &[], &cfg.tracker, cfg.tracker.max_features)
            .into_iter()
            .enumerate()
            .map(|(i, p)| (i as u64, p))
            .collect(),
        (None, None) => {
            return Err(at(DatasetError::Malformed {
                location: seq.name.clone(),
                message: "sequence has neither images nor tracks".into(),
            }))
        }
    };
    let mask = bundle
        .semantics
        .as_ref()
        .map(|s| SemanticMask::new(s, &cfg.semantics.classes, cfg.semantics.erosion_kernel));
    let depth = FrameDepth::new(&bundle.cloud, &seq.extrinsics, &seq.intrinsics, &cfg.depth);
    Ok(features
        .into_iter()
        .map(|(feature_id, pixel)| {
            let (label, ground) = match &mask {
                Some(m) => (m.classify(&pixel), m.is_ground(&pixel)),
                None => (SemanticLabel::Infrastructure, None),
            };
            let neighbors = depth
                .cloud
                .query_rect(&pixel, cfg.depth.roi_half_width, cfg.depth.roi_half_height)
                .len();
            let estimate = (label != SemanticLabel::Dynamic).then(|| depth.estimate(&pixel, ground));
            FeatureDepthRow {
                feature_id,
                pixel,
                label,
                ground,
                neighbors,
                estimate,
            }
        })
        .collect())
}

/// CSV with one row per feature. Dynamic features have an empty estimate
/// and status `skipped_dynamic`.
pub fn write_depth_csv<W: Write>(mut w: W, rows: &[FeatureDepthRow]) -> std::io::Result<()> {
    writeln!(w, "feature_id,u,v,label,ground,neighbors,source,status,depth,normal_x,normal_y,normal_z")?;
    for r in rows {
        let ground = r.ground.map_or(String::new(), |g| g.to_string());
        write!(w, "{},{},{},{:?},{},{},", r.feature_id, r.pixel.x, r.pixel.y, r.label, ground, r.neighbors)?;
        match &r.estimate {
            Some(e) => {
                let depth = e.valid_depth().map_or(String::new(), |d| d.to_string());
                let n = e.plane_normal;
                writeln!(w, "{:?},{},{},{},{},{}", e.source, e.status, depth, n.x, n.y, n.z)?;
            }
            None => writeln!(w, ",skipped_dynamic,,,,")?,
        }
    }
    Ok(())
}
