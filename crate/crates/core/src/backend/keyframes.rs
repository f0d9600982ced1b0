use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::geometry::Pose;

use super::WindowConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameClass {
    /// Must enter the window (the vehicle is turning).
    Required,
    /// Never a keyframe (standstill).
    Rejected,
    /// A keyframe only after the keyframe interval has elapsed.
    Sparsifiable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyframeCategory {
    Required,
    Sparsified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame_id: usize,
    pub timestamp: f64,
    /// Camera-from-world.
    pub pose: Pose,
    pub category: KeyframeCategory,
}

pub fn classify_frame(prior_motion: &Pose, mean_flow: f64, cfg: &WindowConfig) -> FrameClass {
    if mean_flow < cfg.min_mean_flow {
        FrameClass::Rejected
    } else if prior_motion.rotation_angle() >= cfg.turn_angle_threshold {
        FrameClass::Required
    } else {
        FrameClass::Sparsifiable
    }
}

/// Streaming keyframe decision.
#[derive(Debug, Clone, Default)]
pub struct KeyframeSelector {
    last: Option<f64>,
}

impl KeyframeSelector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a keyframe chosen outside [`KeyframeSelector::decide`], such as the first frame.
    pub fn mark(&mut self, timestamp: f64) {
        self.last = Some(timestamp);
    }

    pub fn decide(&mut self, class: FrameClass, timestamp: f64, cfg: &WindowConfig) -> Option<KeyframeCategory> {
        let category = match class {
            FrameClass::Rejected => None,
            FrameClass::Required => Some(KeyframeCategory::Required),
            FrameClass::Sparsifiable => {
                // A tolerance keeps 10 Hz timestamps with rounding noise on a
                // clean every-third-frame cadence.
                let due = self.last.is_none_or(|t| timestamp - t >= cfg.keyframe_interval - 1e-6);
                due.then_some(KeyframeCategory::Sparsified)
            }
        };
        if category.is_some() {
            self.last = Some(timestamp);
        }
        category
    }
}

/// Keyframe decisions for a stream of `(class, timestamp)` frames.
pub fn select_keyframes(frames: &[(FrameClass, f64)], cfg: &WindowConfig) -> Vec<Option<KeyframeCategory>> {
    let mut sel = KeyframeSelector::new();
    frames.iter().map(|&(c, t)| sel.decide(c, t, cfg)).collect()
}

/// Number of newest keyframes to optimise. `shared[k]` is the number of
/// landmarks keyframe `k` (newest first, `shared[0]` for the newest itself)
/// has in common with the newest keyframe.
pub fn window_length(shared: &[usize], cfg: &WindowConfig) -> usize {
    let available = shared.len();
    let mut n = available.min(1);
    while n < available.min(cfg.window_max) && shared[n] >= cfg.min_connectivity {
        n += 1;
    }
    n.max(cfg.window_min.min(available)).min(available)
}

/// `shared[k]` for [`window_length`], from the set of landmark ids seen by each
/// keyframe (newest first).
pub fn shared_counts(seen: &[HashSet<u64>]) -> Vec<usize> {
    match seen.first() {
        None => Vec::new(),
        Some(newest) => seen.iter().map(|s| s.intersection(newest).count()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    #[test]
    fn classification() {
        let cfg = WindowConfig {
            turn_angle_threshold: 0.02,
            ..WindowConfig::default()
        };
        let straight = Pose::from_translation(Vec3::new(0.0, 0.0, -1.0));
        let turn = Pose::from_axis_angle(Vec3::new(0.0, 0.05, 0.0), Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(classify_frame(&straight, 0.0, &cfg), FrameClass::Rejected);
        assert_eq!(classify_frame(&turn, 0.0, &cfg), FrameClass::Rejected);
        assert_eq!(classify_frame(&turn, 10.0, &cfg), FrameClass::Required);
        assert_eq!(classify_frame(&straight, 10.0, &cfg), FrameClass::Sparsifiable);
    }

    #[test]
    fn ten_hertz_every_third() {
        let cfg = WindowConfig::default();
        let frames: Vec<_> = (0..30).map(|i| (FrameClass::Sparsifiable, i as f64 * 0.1)).collect();
        let picked: Vec<usize> = select_keyframes(&frames, &cfg)
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.map(|_| i))
            .collect();
        assert_eq!(picked, (0..30).step_by(3).collect::<Vec<_>>());
    }

    #[test]
    fn required_and_rejected_streams() {
        let cfg = WindowConfig::default();
        let req: Vec<_> = (0..10).map(|i| (FrameClass::Required, i as f64 * 0.1)).collect();
        assert!(select_keyframes(&req, &cfg).iter().all(|d| *d == Some(KeyframeCategory::Required)));
        let rej: Vec<_> = (0..10).map(|i| (FrameClass::Rejected, i as f64 * 0.1)).collect();
        assert!(select_keyframes(&rej, &cfg).iter().all(Option::is_none));
    }

    #[test]
    fn window_length_cases() {
        let cfg = WindowConfig::default();
        assert_eq!(window_length(&[100; 20], &cfg), cfg.window_max);
        assert_eq!(window_length(&[100; 3], &cfg), 3);
        let mut shared = vec![100; 20];
        shared[7] = 0;
        assert_eq!(window_length(&shared, &cfg), 7);
        shared[2] = 0;
        assert_eq!(window_length(&shared, &cfg), cfg.window_min);
        assert_eq!(window_length(&[5], &cfg), 1);
        assert_eq!(window_length(&[], &cfg), 0);
    }

    proptest! {
        #[test]
        fn window_length_matches_intersection_oracle(
            sets in prop::collection::vec(prop::collection::hash_set(0u64..60, 0..40), 1..16),
        ) {
            let cfg = WindowConfig { min_connectivity: 10, ..WindowConfig::default() };
            let shared = shared_counts(&sets);
            // Oracle: intersect explicitly and scan for the first weak link.
            let mut n = 1;
            for s in sets.iter().skip(1).take(cfg.window_max - 1) {
                if s.iter().filter(|x| sets[0].contains(x)).count() < cfg.min_connectivity {
                    break;
                }
                n += 1;
            }
            let n = n.max(cfg.window_min.min(sets.len()));
            prop_assert_eq!(window_length(&shared, &cfg), n);
        }
    }
}
