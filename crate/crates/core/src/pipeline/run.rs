use std::collections::{BTreeMap, HashMap, HashSet};
use std::str::FromStr;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{
    build_and_solve_window, capture_scale, classify_frame, initial_position, select_landmarks, shared_counts,
    window_length, FrameClass, Keyframe, KeyframeCategory, KeyframeSelector, LandmarkCandidate, LandmarkObservation,
};
use crate::depth::FrameDepth;
use crate::frame2frame::{estimate_prior, FrameMatch, FrameMatchSet};
use crate::geometry::{Pose, Vec2, Vec3};
use crate::solver::SolverError;
use crate::tracking::{SemanticLabel, SemanticMask, Tracker};

use super::dataset::{DatasetSequence, FrameBundle};
use super::metric::{kitti_metric, ErrorReport};
use super::{FrameError, PipelineConfig, PipelineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Chained frame-to-frame motion only.
    PriorOnly,
    /// Frame-to-frame prior plus keyframe bundle adjustment.
    Full,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prior_only" | "prior-only" => Ok(Mode::PriorOnly),
            "full" => Ok(Mode::Full),
            _ => Err(format!("unknown mode `{s}`, expected prior_only or full")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::PriorOnly => "prior_only",
            Mode::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: usize,
    pub features: usize,
    pub with_depth: usize,
    pub dynamic: usize,
    /// Matches used by the motion prior.
    pub matches: usize,
    /// `None` for the first frame.
    pub class: Option<FrameClass>,
    pub keyframe: Option<KeyframeCategory>,
    /// One-line description of the window solve at this keyframe.
    pub window: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mode: Mode,
    /// One camera-from-world pose per input frame.
    pub poses: Vec<Pose>,
    pub frames: Vec<FrameRecord>,
    /// Present when the sequence has ground truth long enough to evaluate.
    pub report: Option<ErrorReport>,
}

impl RunOutput {
    pub fn keyframes(&self) -> Vec<usize> {
        self.frames.iter().filter(|f| f.keyframe.is_some()).map(|f| f.frame_id).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct FeatureObs {
    track_id: u64,
    pixel: Vec2,
    depth: Option<f64>,
    label: SemanticLabel,
}

#[derive(Debug, Clone)]
struct FrameFeatures {
    frame_id: usize,
    timestamp: f64,
    obs: Vec<FeatureObs>,
}

type Stage<T> = Result<T, PipelineError>;

fn at_frame(frame_id: usize, e: impl Into<FrameError>) -> PipelineError {
    PipelineError::Frame {
        frame_id,
        source: e.into(),
    }
}

fn load_stage(seq: &DatasetSequence, tx: SyncSender<Stage<FrameBundle>>) {
    for i in 0..seq.len() {
        let item = seq.frame(i).map_err(|e| at_frame(i, e));
        let failed = item.is_err();
        if tx.send(item).is_err() || failed {
            return;
        }
    }
}

fn frontend_stage(
    seq: &DatasetSequence,
    cfg: &PipelineConfig,
    rx: Receiver<Stage<FrameBundle>>,
    tx: SyncSender<Stage<FrameFeatures>>,
) {
    let mut by_frame: Vec<Vec<(u64, Vec2)>> = vec![Vec::new(); seq.len()];
    if let Some(tracks) = &seq.tracks {
        for t in tracks {
            for o in t.observations() {
                if let Some(slot) = by_frame.get_mut(o.frame_id) {
                    slot.push((t.track_id, o.pixel));
                }
            }
        }
    }
    let mut tracker = seq.tracks.is_none().then(|| Tracker::new(cfg.tracker.clone()));
    let mut warned = false;
    for item in rx {
        let result = item.and_then(|bundle| {
            let id = bundle.frame_id;
            let points: Vec<(u64, Vec2)> = match (&mut tracker, bundle.image) {
                (Some(tracker), Some(img)) => {
                    tracker.process(id, img).map_err(|e| at_frame(id, e))?;
                    tracker
                        .live()
                        .iter()
                        .filter_map(|t| t.newest().filter(|o| o.frame_id == id).map(|o| (t.track_id, o.pixel)))
                        .collect()
                }
                (Some(_), None) => {
                    return Err(at_frame(
                        id,
                        super::DatasetError::Malformed {
                            location: seq.name.clone(),
                            message: "sequence has neither images nor tracks".into(),
                        },
                    ))
                }
                (None, _) => std::mem::take(&mut by_frame[id]),
            };
            let mask = bundle
                .semantics
                .as_ref()
                .map(|s| SemanticMask::new(s, &cfg.semantics.classes, cfg.semantics.erosion_kernel));
            if mask.is_none() && !warned {
                log::info!("no semantic images: every track counts as infrastructure");
                warned = true;
            }
            let depth = FrameDepth::new(&bundle.cloud, &seq.extrinsics, &seq.intrinsics, &cfg.depth);
            let obs = points
                .par_iter()
                .map(|&(track_id, pixel)| {
                    let (label, ground) = match &mask {
                        Some(m) => (m.classify(&pixel), m.is_ground(&pixel)),
                        None => (SemanticLabel::Infrastructure, None),
                    };
                    let depth = (label != SemanticLabel::Dynamic)
                        .then(|| depth.estimate(&pixel, ground).valid_depth())
                        .flatten();
                    FeatureObs {
                        track_id,
                        pixel,
                        depth,
                        label,
                    }
                })
                .collect();
            Ok(FrameFeatures {
                frame_id: id,
                timestamp: bundle.timestamp,
                obs,
            })
        });
        let failed = result.is_err();
        if tx.send(result).is_err() || failed {
            return;
        }
    }
}

#[derive(Debug, Clone, Default)]
struct TrackHistory {
    /// `(frame, pixel, depth)`, oldest first.
    obs: Vec<(usize, Vec2, Option<f64>)>,
    label: SemanticLabel,
}

impl TrackHistory {
    fn at(&self, frame: usize) -> Option<&(usize, Vec2, Option<f64>)> {
        self.obs
            .binary_search_by_key(&frame, |o| o.0)
            .ok()
            .map(|i| &self.obs[i])
    }
}

/// Pose of a frame: `rel · anchor`, where `anchor` is a keyframe index.
#[derive(Debug, Clone, Copy)]
struct Anchored {
    anchor: usize,
    rel: Pose,
}

struct Backend<'a> {
    seq: &'a DatasetSequence,
    cfg: &'a PipelineConfig,
    mode: Mode,
    history: BTreeMap<u64, TrackHistory>,
    previous: Option<FrameFeatures>,
    motion: Pose,
    chained: Vec<Pose>,
    keyframes: Vec<Keyframe>,
    keyframe_tracks: Vec<HashSet<u64>>,
    anchored: Vec<Anchored>,
    positions: BTreeMap<u64, Vec3>,
    selector: KeyframeSelector,
    records: Vec<FrameRecord>,
}

impl<'a> Backend<'a> {
    fn new(seq: &'a DatasetSequence, cfg: &'a PipelineConfig, mode: Mode) -> Self {
        Self {
            seq,
            cfg,
            mode,
            history: BTreeMap::new(),
            previous: None,
            motion: Pose::identity(),
            chained: Vec::new(),
            keyframes: Vec::new(),
            keyframe_tracks: Vec::new(),
            anchored: Vec::new(),
            positions: BTreeMap::new(),
            selector: KeyframeSelector::new(),
            records: Vec::new(),
        }
    }

    fn static_tracks(f: &FrameFeatures) -> HashSet<u64> {
        f.obs
            .iter()
            .filter(|o| o.label != SemanticLabel::Dynamic)
            .map(|o| o.track_id)
            .collect()
    }

    fn push_keyframe(&mut self, f: &FrameFeatures, pose: Pose, category: KeyframeCategory) {
        self.keyframes.push(Keyframe {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            pose,
            category,
        });
        self.keyframe_tracks.push(Self::static_tracks(f));
        self.anchored.push(Anchored {
            anchor: self.keyframes.len() - 1,
            rel: Pose::identity(),
        });
    }

    fn mean_flow_since_keyframe(&self, f: &FrameFeatures) -> f64 {
        let Some(kf) = self.keyframes.last() else { return f64::INFINITY };
        let (mut sum, mut n) = (0.0, 0usize);
        for o in f.obs.iter().filter(|o| o.label != SemanticLabel::Dynamic) {
            if let Some(&(_, px, _)) = self.history.get(&o.track_id).and_then(|h| h.at(kf.frame_id)) {
                sum += (o.pixel - px).norm();
                n += 1;
            }
        }
        if n == 0 {
            f64::INFINITY
        } else {
            sum / n as f64
        }
    }

    fn record_history(&mut self, f: &FrameFeatures) {
        for o in &f.obs {
            let h = self.history.entry(o.track_id).or_default();
            h.obs.push((f.frame_id, o.pixel, o.depth));
            h.label = o.label;
        }
    }

    fn prune(&mut self) {
        let keep = self.cfg.window.window_max.max(1);
        if self.keyframes.len() <= keep {
            return;
        }
        let oldest = self.keyframes[self.keyframes.len() - keep].frame_id;
        self.history.retain(|_, h| h.obs.last().is_some_and(|o| o.0 >= oldest));
        let history = &self.history;
        self.positions.retain(|id, _| history.contains_key(id));
    }

    fn solve_window(&mut self, frame_id: usize) -> Result<Option<String>, PipelineError> {
        let cfg = &self.cfg.window;
        let newest_first: Vec<HashSet<u64>> = self.keyframe_tracks.iter().rev().cloned().collect();
        let n = window_length(&shared_counts(&newest_first), cfg);
        if n < 2 {
            return Ok(None);
        }
        let start = self.keyframes.len() - n;
        let mut window: Vec<Keyframe> = self.keyframes[start..].to_vec();
        let poses: HashMap<usize, Pose> = window.iter().map(|k| (k.frame_id, k.pose)).collect();
        let mut candidates = Vec::new();
        for (&track_id, h) in &self.history {
            if h.label == SemanticLabel::Dynamic {
                continue;
            }
            let observations: Vec<LandmarkObservation> = window
                .iter()
                .filter_map(|k| h.at(k.frame_id))
                .map(|&(frame_id, pixel, depth)| LandmarkObservation { frame_id, pixel, depth })
                .collect();
            if observations.len() < 2 {
                continue;
            }
            let position = match self.positions.get(&track_id) {
                Some(p) => *p,
                None => match initial_position(&observations, &poses, &self.seq.intrinsics) {
                    Some(p) => p,
                    None => continue,
                },
            };
            candidates.push(LandmarkCandidate {
                track_id,
                position,
                label: h.label,
                observations,
                track_length: h.obs.len(),
            });
        }
        let mut landmarks = select_landmarks(candidates, &poses, frame_id, cfg, cfg.seed ^ frame_id as u64);
        if landmarks.is_empty() {
            return Ok(None);
        }
        let scale = capture_scale(&window, cfg);
        let summary = match build_and_solve_window(
            &mut window,
            &mut landmarks,
            scale,
            &self.seq.intrinsics,
            cfg,
            &self.cfg.trim,
            &self.cfg.solver,
        ) {
            Ok(s) => s,
            Err(SolverError::EmptyProblem) => return Ok(None),
            Err(e) => return Err(at_frame(frame_id, e)),
        };
        for (dst, src) in self.keyframes[start..].iter_mut().zip(&window) {
            dst.pose = src.pose;
        }
        for l in &landmarks {
            self.positions.insert(l.track_id, l.position);
        }
        Ok(Some(summary.to_string()))
    }

    fn process(&mut self, f: FrameFeatures) -> Result<(), PipelineError> {
        let id = f.frame_id;
        let dynamic = f.obs.iter().filter(|o| o.label == SemanticLabel::Dynamic).count();
        let with_depth = f.obs.iter().filter(|o| o.depth.is_some()).count();
        let mut record = FrameRecord {
            frame_id: id,
            features: f.obs.len(),
            with_depth,
            dynamic,
            matches: 0,
            class: None,
            keyframe: None,
            window: None,
        };
        let Some(prev) = self.previous.take() else {
            self.chained.push(Pose::identity());
            if self.mode == Mode::Full {
                self.selector.mark(f.timestamp);
                self.push_keyframe(&f, Pose::identity(), KeyframeCategory::Required);
                record.keyframe = Some(KeyframeCategory::Required);
            }
            self.record_history(&f);
            self.records.push(record);
            self.previous = Some(f);
            return Ok(());
        };

        let before: HashMap<u64, (Vec2, Option<f64>)> = prev
            .obs
            .iter()
            .filter(|o| o.label != SemanticLabel::Dynamic)
            .map(|o| (o.track_id, (o.pixel, o.depth)))
            .collect();
        let matches: Vec<FrameMatch> = f
            .obs
            .iter()
            .filter(|o| o.label != SemanticLabel::Dynamic)
            .filter_map(|o| {
                before.get(&o.track_id).map(|&(previous, depth_prev)| FrameMatch {
                    current: o.pixel,
                    previous,
                    depth_prev,
                })
            })
            .collect();
        record.matches = matches.len();
        let set = FrameMatchSet::new(matches, self.seq.intrinsics).map_err(|e| at_frame(id, e))?;
        let motion = estimate_prior(&set, &self.motion, &self.cfg.prior).map_err(|e| at_frame(id, e))?;
        self.motion = motion;
        let last = *self.chained.last().expect("first frame handled above");
        self.chained.push(motion * last);

        if self.mode == Mode::Full {
            let prev_anchor = *self.anchored.last().expect("first frame handled above");
            let rel = motion * prev_anchor.rel;
            let estimate = rel * self.keyframes[prev_anchor.anchor].pose;
            let class = classify_frame(&motion, self.mean_flow_since_keyframe(&f), &self.cfg.window);
            record.class = Some(class);
            self.record_history(&f);
            match self.selector.decide(class, f.timestamp, &self.cfg.window) {
                Some(category) => {
                    self.push_keyframe(&f, estimate, category);
                    record.keyframe = Some(category);
                    record.window = self.solve_window(id)?;
                    self.prune();
                }
                None => self.anchored.push(Anchored {
                    anchor: prev_anchor.anchor,
                    rel,
                }),
            }
        }
        self.records.push(record);
        self.previous = Some(f);
        Ok(())
    }

    fn finish(self) -> (Vec<Pose>, Vec<FrameRecord>) {
        let poses = match self.mode {
            Mode::PriorOnly => self.chained,
            Mode::Full => self
                .anchored
                .iter()
                .map(|a| a.rel * self.keyframes[a.anchor].pose)
                .collect(),
        };
        (poses, self.records)
    }
}

/// Runs visual odometry over a sequence and returns one pose per frame.
///
/// Loading, feature extraction with depth, and motion estimation run as
/// three threads handing frames along in order, so results do not depend
/// on scheduling. With a trimming time bound the window solves depend on
/// wall-clock speed; disable it for bit-identical reruns.
pub fn run_pipeline(seq: &DatasetSequence, cfg: &PipelineConfig, mode: Mode) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    seq.validate()?;
    let (bundle_tx, bundle_rx) = sync_channel(2);
    let (feature_tx, feature_rx) = sync_channel(2);
    let mut backend = Backend::new(seq, cfg, mode);
    let result = std::thread::scope(|s| {
        s.spawn(|| load_stage(seq, bundle_tx));
        s.spawn(|| frontend_stage(seq, cfg, bundle_rx, feature_tx));
        for item in feature_rx {
            backend.process(item?)?;
        }
        Ok::<(), PipelineError>(())
    });
    result?;
    let (poses, frames) = backend.finish();
    let report = match &seq.ground_truth {
        Some(gt) if gt.len() == poses.len() => match kitti_metric(&poses, gt) {
            Ok(r) => Some(r),
            Err(e) => {
                log::info!("no error report: {e}");
                None
            }
        },
        _ => None,
    };
    Ok(RunOutput {
        mode,
        poses,
        frames,
        report,
    })
}
