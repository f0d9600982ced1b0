use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;

use super::{FeatureTrack, SemanticLabel, TrackingError};

/// Which class ids count as dynamic, vegetation and road surface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassTable {
    pub dynamic: Vec<u8>,
    pub vegetation: Vec<u8>,
    pub ground: Vec<u8>,
}

impl Default for ClassTable {
    /// Cityscapes label ids.
    fn default() -> Self {
        Self {
            // person, rider, car, truck, bus, caravan, trailer, train, motorcycle, bicycle
            dynamic: (24..=33).collect(),
            vegetation: vec![21],
            // road, sidewalk, parking
            ground: vec![7, 8, 9],
        }
    }
}

impl ClassTable {
    fn lookup(&self) -> [u8; 256] {
        let mut t = [0u8; 256];
        for &c in &self.dynamic {
            t[c as usize] |= DYNAMIC;
        }
        for &c in &self.vegetation {
            t[c as usize] |= VEGETATION;
        }
        for &c in &self.ground {
            t[c as usize] |= GROUND;
        }
        t
    }
}

const DYNAMIC: u8 = 1;
const VEGETATION: u8 = 2;
const GROUND: u8 = 4;

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl SemanticImage {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self, TrackingError> {
        if labels.len() != width * height {
            return Err(TrackingError::Dimensions(format!(
                "label buffer has {} entries for {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self {
            width,
            height,
            labels: vec![class; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.labels[y * self.width + x] = class;
    }

    /// Fills the axis-aligned rectangle `[x0, x1) × [y0, y1)`, clipped to the image.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, class: u8) {
        let xs = x0.max(0) as usize..x1.clamp(0, self.width as i64) as usize;
        for y in y0.max(0) as usize..y1.clamp(0, self.height as i64) as usize {
            for x in xs.clone() {
                self.set(x, y, class);
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, TrackingError> {
        let img = image::open(path)
            .map_err(|e| TrackingError::Image(format!("{}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrackingError> {
        image::GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer size checked at construction")
            .save(path)
            .map_err(|e| TrackingError::Image(format!("{}: {e}", path.display())))
    }
}

/// Erodes a binary mask with a `kernel × kernel` square. A pixel survives
/// when every in-image pixel of its window is set.
pub fn erode(mask: &[bool], width: usize, height: usize, kernel: usize) -> Vec<bool> {
    let r = kernel / 2;
    let pass = |get: &dyn Fn(usize, usize) -> bool, len: usize, lines: usize| -> Vec<bool> {
        // Out-of-line result indexed [line][pos].
        let mut out = vec![false; len * lines];
        let mut holes = vec![0usize; len + 1];
        for l in 0..lines {
            for p in 0..len {
                holes[p + 1] = holes[p] + usize::from(!get(l, p));
            }
            for p in 0..len {
                let lo = p.saturating_sub(r);
                let hi = (p + r + 1).min(len);
                out[l * len + p] = holes[hi] == holes[lo];
            }
        }
        out
    };
    let rows = pass(&|y, x| mask[y * width + x], width, height);
    let cols = pass(&|x, y| rows[y * width + x], height, width);
    let mut out = vec![false; width * height];
    for x in 0..width {
        for y in 0..height {
            out[y * width + x] = cols[x * height + y];
        }
    }
    out
}

/// Semantic lookups for one frame: the eroded dynamic mask and raw class flags.
#[derive(Debug, Clone)]
pub struct SemanticMask {
    width: usize,
    height: usize,
    flags: Vec<u8>,
    dynamic: Vec<bool>,
}

impl SemanticMask {
    pub fn new(labels: &SemanticImage, table: &ClassTable, kernel: usize) -> Self {
        let lut = table.lookup();
        let flags: Vec<u8> = labels.labels.iter().map(|&c| lut[c as usize]).collect();
        let raw: Vec<bool> = flags.iter().map(|f| f & DYNAMIC != 0).collect();
        let dynamic = if kernel > 1 {
            erode(&raw, labels.width, labels.height, kernel)
        } else {
            raw
        };
        Self {
            width: labels.width,
            height: labels.height,
            flags,
            dynamic,
        }
    }

    pub fn eroded_dynamic(&self) -> &[bool] {
        &self.dynamic
    }

    fn window(&self, pixel: &Vec2) -> impl Iterator<Item = usize> + '_ {
        let cx = pixel.x.round() as i64;
        let cy = pixel.y.round() as i64;
        (-1..=1)
            .flat_map(move |dy| (-1..=1).map(move |dx| (cx + dx, cy + dy)))
            .filter(|&(x, y)| x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height)
            .map(|(x, y)| y as usize * self.width + x as usize)
    }

    /// 3 × 3 majority vote around `pixel`. A tie counts as dynamic.
    pub fn classify(&self, pixel: &Vec2) -> SemanticLabel {
        let (mut total, mut dynamic, mut vegetation) = (0usize, 0usize, 0usize);
        for i in self.window(pixel) {
            total += 1;
            dynamic += usize::from(self.dynamic[i]);
            vegetation += usize::from(self.flags[i] & VEGETATION != 0);
        }
        if total == 0 {
            return SemanticLabel::Unknown;
        }
        if 2 * dynamic >= total {
            SemanticLabel::Dynamic
        } else if 2 * vegetation > total {
            SemanticLabel::Vegetation
        } else {
            SemanticLabel::Infrastructure
        }
    }

    /// Majority of the 3 × 3 window is road surface.
    pub fn is_ground(&self, pixel: &Vec2) -> Option<bool> {
        let (mut total, mut ground) = (0usize, 0usize);
        for i in self.window(pixel) {
            total += 1;
            ground += usize::from(self.flags[i] & GROUND != 0);
        }
        (total > 0).then_some(2 * ground > total)
    }
}

/// Labels a track from its newest observation.
pub fn semantic_filter(track: &mut FeatureTrack, mask: &SemanticMask) -> SemanticLabel {
    let label = match track.newest() {
        Some(obs) => {
            let label = mask.classify(&obs.pixel);
            track.on_ground = mask.is_ground(&obs.pixel);
            label
        }
        None => SemanticLabel::Unknown,
    };
    track.semantic_label = label;
    label
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracking::Observation;
    use proptest::prelude::*;

    const CAR: u8 = 26;
    const BUILDING: u8 = 11;
    const TREE: u8 = 21;

    fn track_at(x: f64, y: f64) -> FeatureTrack {
        let mut t = FeatureTrack::new(1);
        t.push(Observation::new(0, Vec2::new(x - 3.0, y))).unwrap();
        t.push(Observation::new(1, Vec2::new(x, y))).unwrap();
        t
    }

    fn scene() -> SemanticImage {
        let mut img = SemanticImage::filled(200, 120, BUILDING);
        img.fill_rect(50, 30, 100, 80, CAR);
        img.fill_rect(150, 0, 200, 120, TREE);
        img
    }

    #[test]
    fn vehicle_centre_is_dynamic() {
        let mask = SemanticMask::new(&scene(), &ClassTable::default(), 21);
        let mut t = track_at(75.0, 55.0);
        assert_eq!(semantic_filter(&mut t, &mask), SemanticLabel::Dynamic);
        assert_eq!(t.semantic_label, SemanticLabel::Dynamic);
    }

    #[test]
    fn building_is_infrastructure() {
        let mask = SemanticMask::new(&scene(), &ClassTable::default(), 21);
        let mut t = track_at(20.0, 20.0);
        assert_eq!(semantic_filter(&mut t, &mask), SemanticLabel::Infrastructure);
        let mut t = track_at(175.0, 60.0);
        assert_eq!(semantic_filter(&mut t, &mask), SemanticLabel::Vegetation);
    }

    #[test]
    fn vehicle_border_is_eroded_away() {
        let mask = SemanticMask::new(&scene(), &ClassTable::default(), 21);
        // 5 px inside the left edge of the car.
        let mut t = track_at(55.0, 55.0);
        assert_ne!(semantic_filter(&mut t, &mask), SemanticLabel::Dynamic);
        // Without erosion the same point is dynamic.
        let raw = SemanticMask::new(&scene(), &ClassTable::default(), 1);
        assert_eq!(semantic_filter(&mut t, &raw), SemanticLabel::Dynamic);
    }

    #[test]
    fn filter_is_idempotent() {
        let mask = SemanticMask::new(&scene(), &ClassTable::default(), 21);
        for (x, y) in [(75.0, 55.0), (61.0, 41.0), (60.0, 40.0), (0.0, 0.0), (175.0, 10.0)] {
            let mut t = track_at(x, y);
            let a = semantic_filter(&mut t, &mask);
            let b = semantic_filter(&mut t, &mask);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ground_flag() {
        let mut img = SemanticImage::filled(40, 40, BUILDING);
        img.fill_rect(0, 20, 40, 40, 7);
        let mask = SemanticMask::new(&img, &ClassTable::default(), 21);
        assert_eq!(mask.is_ground(&Vec2::new(10.0, 30.0)), Some(true));
        assert_eq!(mask.is_ground(&Vec2::new(10.0, 5.0)), Some(false));
        assert_eq!(mask.is_ground(&Vec2::new(-10.0, 5.0)), None);
    }

    #[test]
    fn tie_counts_as_dynamic() {
        // Corner pixel: window clipped to 4 pixels, 2 of them dynamic.
        let mut img = SemanticImage::filled(10, 10, BUILDING);
        img.set(0, 0, CAR);
        img.set(1, 0, CAR);
        let mask = SemanticMask::new(&img, &ClassTable::default(), 1);
        assert_eq!(mask.classify(&Vec2::new(0.0, 0.0)), SemanticLabel::Dynamic);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let img = scene();
        img.save(&p).unwrap();
        assert_eq!(SemanticImage::load(&p).unwrap(), img);
    }

    fn brute_erode(mask: &[bool], w: usize, h: usize, k: usize) -> Vec<bool> {
        let r = (k / 2) as i64;
        let mut out = vec![false; w * h];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut keep = mask[(y as usize) * w + x as usize];
                for yy in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                        keep &= mask[yy as usize * w + xx as usize];
                    }
                }
                out[(y as usize) * w + x as usize] = keep;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn erosion_matches_brute_force(
            rects in prop::collection::vec((0i64..64, 0i64..64, 1i64..40, 1i64..40), 0..6),
            k in prop::sample::select(vec![1usize, 3, 5, 9, 21]),
        ) {
            let mut img = SemanticImage::filled(64, 64, BUILDING);
            for (x, y, w, h) in rects {
                img.fill_rect(x, y, x + w, y + h, CAR);
            }
            let raw: Vec<bool> = img.labels.iter().map(|&c| c == CAR).collect();
            prop_assert_eq!(erode(&raw, 64, 64, k), brute_erode(&raw, 64, 64, k));
        }
    }
}
