use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depth::DepthEstimate;
use crate::geometry::Vec2;

use super::TrackingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum SemanticLabel {
    Infrastructure,
    Vegetation,
    Dynamic,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame_id: usize,
    pub pixel: Vec2,
    pub depth: Option<DepthEstimate>,
}

impl Observation {
    pub fn new(frame_id: usize, pixel: Vec2) -> Self {
        Self {
            frame_id,
            pixel,
            depth: None,
        }
    }

    pub fn valid_depth(&self) -> Option<f64> {
        self.depth.and_then(|d| d.valid_depth())
    }
}

/// A feature followed through consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub track_id: u64,
    observations: Vec<Observation>,
    pub semantic_label: SemanticLabel,
    /// True when the newest observation lies on road or sidewalk.
    pub on_ground: Option<bool>,
}

impl FeatureTrack {
    pub fn new(track_id: u64) -> Self {
        Self {
            track_id,
            observations: Vec::new(),
            semantic_label: SemanticLabel::Unknown,
            on_ground: None,
        }
    }

    /// Appends an observation; frame ids must strictly increase.
    pub fn push(&mut self, obs: Observation) -> Result<(), TrackingError> {
        if let Some(last) = self.observations.last() {
            if obs.frame_id <= last.frame_id {
                return Err(TrackingError::NonIncreasingFrame {
                    track_id: self.track_id,
                    frame_id: obs.frame_id,
                });
            }
        }
        self.observations.push(obs);
        Ok(())
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn observations_mut(&mut self) -> &mut [Observation] {
        &mut self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn first(&self) -> Option<&Observation> {
        self.observations.first()
    }

    pub fn newest(&self) -> Option<&Observation> {
        self.observations.last()
    }

    pub fn at(&self, frame_id: usize) -> Option<&Observation> {
        self.observations
            .binary_search_by_key(&frame_id, |o| o.frame_id)
            .ok()
            .map(|i| &self.observations[i])
    }

    pub fn at_mut(&mut self, frame_id: usize) -> Option<&mut Observation> {
        self.observations
            .binary_search_by_key(&frame_id, |o| o.frame_id)
            .ok()
            .map(move |i| &mut self.observations[i])
    }

    /// Observations up to and including `frame_id`.
    pub fn until(&self, frame_id: usize) -> &[Observation] {
        let end = self.observations.partition_point(|o| o.frame_id <= frame_id);
        &self.observations[..end]
    }
}

/// Parses a track file: one `track_id frame_id u v` observation per line.
/// Blank lines and `#` comments are skipped. Tracks come back sorted by id.
pub fn parse_tracks<R: BufRead>(reader: R, origin: &str) -> Result<Vec<FeatureTrack>, TrackingError> {
    let mut tracks: BTreeMap<u64, FeatureTrack> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let err = |msg: String| TrackingError::Parse {
            location: format!("{origin}:{lineno}"),
            message: msg,
        };
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let track_id: u64 = fields[0].parse().map_err(|e| err(format!("track id: {e}")))?;
        let frame_id: usize = fields[1].parse().map_err(|e| err(format!("frame id: {e}")))?;
        let u: f64 = fields[2].parse().map_err(|e| err(format!("u: {e}")))?;
        let v: f64 = fields[3].parse().map_err(|e| err(format!("v: {e}")))?;
        if !u.is_finite() || !v.is_finite() {
            return Err(err("non-finite pixel coordinate".into()));
        }
        let track = tracks.entry(track_id).or_insert_with(|| FeatureTrack::new(track_id));
        track
            .push(Observation::new(frame_id, Vec2::new(u, v)))
            .map_err(|_| err(format!("frame {frame_id} does not follow the previous observation of track {track_id}")))?;
    }
    Ok(tracks.into_values().collect())
}

pub fn ingest_tracks(path: &Path) -> Result<Vec<FeatureTrack>, TrackingError> {
    let file = std::fs::File::open(path)?;
    parse_tracks(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_tracks<W: std::io::Write>(mut w: W, tracks: &[FeatureTrack]) -> std::io::Result<()> {
    for t in tracks {
        for o in t.observations() {
            writeln!(w, "{} {} {} {}", t.track_id, o.frame_id, o.pixel.x, o.pixel.y)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<FeatureTrack>, TrackingError> {
        parse_tracks(s.as_bytes(), "mem")
    }

    #[test]
    fn empty_file() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("# header\n\n").unwrap().is_empty());
    }

    #[test]
    fn one_track_three_frames() {
        let t = parse("7 0 10 20\n7 1 11 20.5\n7 2 12.25 21\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].track_id, 7);
        assert_eq!(t[0].len(), 3);
        assert_eq!(t[0].at(2).unwrap().pixel, Vec2::new(12.25, 21.0));
        assert!(t[0].at(3).is_none());
    }

    #[test]
    fn duplicate_frame_is_rejected() {
        let e = parse("1 0 1 1\n1 4 2 2\n1 4 3 3\n").unwrap_err();
        match e {
            TrackingError::Parse { location, .. } => assert_eq!(location, "mem:3"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_location() {
        let e = parse("1 0 1 1\n\n1 x 2 2\n").unwrap_err();
        assert!(e.to_string().contains("mem:3"), "{e}");
        assert!(parse("1 0 1\n").is_err());
        assert!(parse("1 0 nan 1\n").is_err());
    }

    #[test]
    fn interleaved_tracks_are_grouped() {
        let t = parse("2 0 1 1\n1 0 5 5\n2 1 1 2\n1 1 5 6\n").unwrap();
        assert_eq!(t.iter().map(|t| t.track_id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(t.iter().all(|t| t.len() == 2));
    }

    #[test]
    fn write_then_parse() {
        let t = parse("3 1 1.5 2.5\n3 4 2 3\n9 2 7 8\n").unwrap();
        let mut buf = Vec::new();
        write_tracks(&mut buf, &t).unwrap();
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap(), t);
    }

    #[test]
    fn until_slices_history() {
        let t = &parse("1 0 0 0\n1 2 0 0\n1 5 0 0\n").unwrap()[0];
        assert_eq!(t.until(1).len(), 1);
        assert_eq!(t.until(2).len(), 2);
        assert_eq!(t.until(9).len(), 3);
    }
}
