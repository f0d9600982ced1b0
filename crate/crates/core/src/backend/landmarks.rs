use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec2, Vec3};
use crate::tracking::SemanticLabel;

use super::WindowConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bin {
    Near,
    Middle,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkObservation {
    pub frame_id: usize,
    pub pixel: Vec2,
    /// Measured camera-frame depth, when the LIDAR provided one.
    pub depth: Option<f64>,
}

/// A track with an initial world position, before selection.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkCandidate {
    pub track_id: u64,
    pub position: Vec3,
    pub label: SemanticLabel,
    /// Observations in window keyframes, oldest first.
    pub observations: Vec<LandmarkObservation>,
    /// Total length of the feature track, frames.
    pub track_length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub track_id: u64,
    pub position: Vec3,
    pub bin: Bin,
    pub weight: f64,
    pub observations: Vec<LandmarkObservation>,
}

impl Landmark {
    pub fn depth_count(&self) -> usize {
        self.observations.iter().filter(|o| o.depth.is_some()).count()
    }
}

pub fn assign_bin(depth: f64, cfg: &WindowConfig) -> Bin {
    if depth < cfg.near_max {
        Bin::Near
    } else if depth < cfg.middle_max {
        Bin::Middle
    } else {
        Bin::Far
    }
}

/// Pixel displacement between the oldest and newest window observation.
pub fn flow(c: &LandmarkCandidate) -> f64 {
    match (c.observations.first(), c.observations.last()) {
        (Some(a), Some(b)) => (b.pixel - a.pixel).norm(),
        _ => 0.0,
    }
}

/// Positive depth in every observing camera.
pub fn passes_cheirality(c: &LandmarkCandidate, poses: &HashMap<usize, Pose>) -> bool {
    c.observations.iter().all(|o| {
        poses
            .get(&o.frame_id)
            .is_some_and(|p| p.transform_point(&c.position).z > 0.0)
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Keeps one candidate per voxel: the one closest to the voxel's
/// coordinate-wise median, ties to the lower track id.
pub fn voxel_filter(cands: Vec<LandmarkCandidate>, size: f64) -> Vec<LandmarkCandidate> {
    if !(size > 0.0) {
        return cands;
    }
    let mut voxels: BTreeMap<(i64, i64, i64), Vec<LandmarkCandidate>> = BTreeMap::new();
    for c in cands {
        let key = (
            (c.position.x / size).floor() as i64,
            (c.position.y / size).floor() as i64,
            (c.position.z / size).floor() as i64,
        );
        voxels.entry(key).or_default().push(c);
    }
    voxels
        .into_values()
        .map(|group| {
            let m = Vec3::new(
                median(group.iter().map(|c| c.position.x).collect()),
                median(group.iter().map(|c| c.position.y).collect()),
                median(group.iter().map(|c| c.position.z).collect()),
            );
            group
                .into_iter()
                .min_by(|a, b| {
                    (a.position - m)
                        .norm_squared()
                        .total_cmp(&(b.position - m).norm_squared())
                        .then(a.track_id.cmp(&b.track_id))
                })
                .unwrap()
        })
        .collect()
}

/// Picks the landmarks for one window.
///
/// Candidates need two observations, positive depth in every observing
/// camera and a non-dynamic label. They are binned by depth in the
/// `reference` keyframe, thinned by a voxel filter and ranked per bin: near
/// by optical flow, middle at random, far by track length.
pub fn select_landmarks(
    candidates: Vec<LandmarkCandidate>,
    poses: &HashMap<usize, Pose>,
    reference: usize,
    cfg: &WindowConfig,
    seed: u64,
) -> Vec<Landmark> {
    let Some(ref_pose) = poses.get(&reference) else {
        return Vec::new();
    };
    let mut bins: BTreeMap<Bin, Vec<LandmarkCandidate>> = BTreeMap::new();
    for c in candidates {
        if c.observations.len() < 2 || c.label == SemanticLabel::Dynamic || !passes_cheirality(&c, poses) {
            continue;
        }
        let z = ref_pose.transform_point(&c.position).z;
        if z <= 0.0 {
            continue;
        }
        bins.entry(assign_bin(z, cfg)).or_default().push(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (bin, mut cands) in bins {
        cands.sort_by_key(|c| c.track_id);
        let (voxel, quota) = match bin {
            Bin::Near => (cfg.voxel_near, cfg.quota_near),
            Bin::Middle => (cfg.voxel_middle, cfg.quota_middle),
            Bin::Far => (0.0, cfg.quota_far),
        };
        let mut cands = voxel_filter(cands, voxel);
        match bin {
            Bin::Near => cands.sort_by(|a, b| flow(b).total_cmp(&flow(a)).then(a.track_id.cmp(&b.track_id))),
            Bin::Middle => {
                cands.sort_by_key(|c| c.track_id);
                cands.shuffle(&mut rng);
            }
            Bin::Far => cands.sort_by(|a, b| b.track_length.cmp(&a.track_length).then(a.track_id.cmp(&b.track_id))),
        }
        out.extend(cands.into_iter().take(quota).map(|c| Landmark {
            track_id: c.track_id,
            position: c.position,
            bin,
            weight: if c.label == SemanticLabel::Vegetation {
                cfg.vegetation_weight
            } else {
                1.0
            },
            observations: c.observations,
        }));
    }
    out.sort_by_key(|l| l.track_id);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: u64, pos: Vec3, frames: &[(usize, f64)]) -> LandmarkCandidate {
        LandmarkCandidate {
            track_id: id,
            position: pos,
            label: SemanticLabel::Infrastructure,
            observations: frames
                .iter()
                .map(|&(f, u)| LandmarkObservation {
                    frame_id: f,
                    pixel: Vec2::new(u, 100.0),
                    depth: None,
                })
                .collect(),
            track_length: frames.len(),
        }
    }

    fn poses() -> HashMap<usize, Pose> {
        (0..3)
            .map(|i| (i, Pose::from_translation(Vec3::new(0.0, 0.0, -(i as f64)))))
            .collect()
    }

    #[test]
    fn behind_camera_is_excluded() {
        let cfg = WindowConfig::default();
        let c = vec![
            cand(1, Vec3::new(0.0, 0.0, 1.5), &[(0, 10.0), (2, 12.0)]),
            cand(2, Vec3::new(0.0, 0.0, 10.0), &[(0, 10.0), (2, 12.0)]),
        ];
        let got = select_landmarks(c, &poses(), 2, &cfg, 0);
        assert_eq!(got.iter().map(|l| l.track_id).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn coincident_landmarks_collapse() {
        let cfg = WindowConfig::default();
        let c: Vec<_> = (0..100)
            .map(|i| cand(i, Vec3::new(0.1, 0.1, 10.1), &[(0, 10.0), (1, 12.0)]))
            .collect();
        let got = select_landmarks(c, &poses(), 1, &cfg, 0);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].track_id, 0);
    }

    #[test]
    fn near_ranked_by_flow() {
        let cfg = WindowConfig {
            quota_near: 1,
            ..WindowConfig::default()
        };
        let c = vec![
            cand(1, Vec3::new(-3.0, 0.0, 10.0), &[(0, 100.0), (1, 104.0)]),
            cand(2, Vec3::new(3.0, 0.0, 10.0), &[(0, 100.0), (1, 112.0)]),
        ];
        let got = select_landmarks(c, &poses(), 1, &cfg, 0);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].track_id, 2);
    }

    #[test]
    fn far_ranked_by_track_length_and_weights() {
        let cfg = WindowConfig {
            quota_far: 1,
            ..WindowConfig::default()
        };
        let mut a = cand(1, Vec3::new(0.0, 0.0, 200.0), &[(0, 1.0), (1, 1.0)]);
        a.track_length = 4;
        let mut b = cand(2, Vec3::new(5.0, 0.0, 200.0), &[(0, 1.0), (1, 1.0)]);
        b.track_length = 9;
        let mut veg = cand(3, Vec3::new(0.0, 0.0, 5.0), &[(0, 1.0), (1, 3.0)]);
        veg.label = SemanticLabel::Vegetation;
        let mut dynamic = cand(4, Vec3::new(1.0, 0.0, 5.0), &[(0, 1.0), (1, 3.0)]);
        dynamic.label = SemanticLabel::Dynamic;
        let got = select_landmarks(vec![a, b, veg, dynamic], &poses(), 1, &cfg, 0);
        assert_eq!(got.iter().map(|l| (l.track_id, l.bin)).collect::<Vec<_>>(), vec![(2, Bin::Far), (3, Bin::Near)]);
        assert_eq!(got[1].weight, 0.9);
        assert_eq!(got[0].weight, 1.0);
    }

    #[test]
    fn bins_partition_and_respect_bounds() {
        let cfg = WindowConfig::default();
        let ps = poses();
        let c: Vec<_> = (0..400)
            .map(|i| cand(i, Vec3::new((i % 20) as f64 * 3.0 - 30.0, 0.0, 2.0 + i as f64 * 0.4), &[(0, 1.0), (1, 2.0)]))
            .collect();
        let got = select_landmarks(c, &ps, 1, &cfg, 3);
        for l in &got {
            let z = ps[&1].transform_point(&l.position).z;
            assert_eq!(assign_bin(z, &cfg), l.bin);
        }
        let mut ids: Vec<_> = got.iter().map(|l| l.track_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), got.len());
        for bin in [Bin::Near, Bin::Middle, Bin::Far] {
            assert!(got.iter().filter(|l| l.bin == bin).count() <= 100);
        }
    }

    #[test]
    fn middle_selection_depends_on_seed_only() {
        let cfg = WindowConfig {
            quota_middle: 5,
            ..WindowConfig::default()
        };
        let c: Vec<_> = (0..50)
            .map(|i| cand(i, Vec3::new(i as f64 * 3.0 - 75.0, 0.0, 50.0), &[(0, 1.0), (1, 2.0)]))
            .collect();
        let mut rev = c.clone();
        rev.reverse();
        let a = select_landmarks(c.clone(), &poses(), 1, &cfg, 11);
        let b = select_landmarks(rev, &poses(), 1, &cfg, 11);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let other = select_landmarks(c, &poses(), 1, &cfg, 12);
        assert_ne!(a, other);
    }
}
