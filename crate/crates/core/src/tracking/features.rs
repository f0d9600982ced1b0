use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;

use super::{FeatureTrack, Observation, TrackingError};

/// Grayscale image stored as `f32` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, TrackingError> {
        if data.len() != width * height {
            return Err(TrackingError::Dimensions(format!(
                "image buffer has {} entries for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_luma(img: &image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TrackingError> {
        let img = image::open(path)
            .map_err(|e| TrackingError::Image(format!("{}: {e}", path.display())))?
            .into_luma8();
        Ok(Self::from_luma(&img))
    }

    pub fn to_luma(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("size checked")
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub max_features: usize,
    /// Minimum distance between detected corners, pixels.
    pub nms_radius: usize,
    /// Corners weaker than this fraction of the strongest are dropped.
    pub quality_level: f32,
    pub patch_radius: usize,
    /// Largest flow searched, pixels.
    pub search_radius: usize,
    /// Largest mean squared patch difference per pixel.
    pub max_ssd: f32,
    /// Best SSD must be below this fraction of the best SSD outside its 3 × 3 neighbourhood.
    pub uniqueness: f32,
    /// Matches whose flow deviates more than this from the local median are dropped, pixels.
    pub max_flow_deviation: f64,
    /// Radius of the neighbourhood for the median flow, pixels.
    pub median_radius: f64,
    pub border: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            max_features: 1500,
            nms_radius: 8,
            quality_level: 0.01,
            patch_radius: 4,
            search_radius: 24,
            max_ssd: 400.0,
            uniqueness: 0.8,
            max_flow_deviation: 3.0,
            median_radius: 80.0,
            border: 12,
        }
    }
}

/// Minimum eigenvalue of the 3 × 3 structure tensor at every pixel.
pub fn corner_scores(img: &GrayImage) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let mut gxx = vec![0f32; w * h];
    let mut gxy = vec![0f32; w * h];
    let mut gyy = vec![0f32; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = 0.5 * (img.at(x + 1, y) - img.at(x - 1, y));
            let gy = 0.5 * (img.at(x, y + 1) - img.at(x, y - 1));
            let i = y * w + x;
            gxx[i] = gx * gx;
            gxy[i] = gx * gy;
            gyy[i] = gy * gy;
        }
    }
    let mut score = vec![0f32; w * h];
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            let (mut a, mut b, mut c) = (0f32, 0f32, 0f32);
            for dy in 0..3 {
                let row = (y + dy - 1) * w;
                for dx in 0..3 {
                    let i = row + x + dx - 1;
                    a += gxx[i];
                    b += gxy[i];
                    c += gyy[i];
                }
            }
            let tr = 0.5 * (a + c);
            let det = ((0.5 * (a - c)).powi(2) + b * b).sqrt();
            score[y * w + x] = tr - det;
        }
    }
    score
}

/// Shi-Tomasi corners with greedy non-maximum suppression, strongest first.
/// Corners closer than `nms_radius` to any of `existing` are skipped.
pub fn detect_corners(img: &GrayImage, existing: &[Vec2], cfg: &TrackerConfig, max: usize) -> Vec<Vec2> {
    let (w, h) = (img.width, img.height);
    let score = corner_scores(img);
    let best = score.iter().copied().fold(0f32, f32::max);
    if best <= 0.0 || max == 0 {
        return Vec::new();
    }
    let floor = best * cfg.quality_level;
    let b = cfg.border.max(2);
    let mut cand: Vec<(f32, usize, usize)> = Vec::new();
    for y in b..h.saturating_sub(b) {
        for x in b..w.saturating_sub(b) {
            let s = score[y * w + x];
            if s > floor {
                cand.push((s, x, y));
            }
        }
    }
    cand.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.2, p.1).cmp(&(q.2, q.1))));

    let r = cfg.nms_radius.max(1);
    let gw = w / r + 1;
    let gh = h / r + 1;
    let mut grid: Vec<Vec<Vec2>> = vec![Vec::new(); gw * gh];
    let r2 = (r * r) as f64;
    let blocked = |grid: &Vec<Vec<Vec2>>, p: &Vec2| {
        let cx = (p.x as usize / r) as i64;
        let cy = (p.y as usize / r) as i64;
        for gy in (cy - 1).max(0)..=(cy + 1).min(gh as i64 - 1) {
            for gx in (cx - 1).max(0)..=(cx + 1).min(gw as i64 - 1) {
                if grid[gy as usize * gw + gx as usize].iter().any(|q| (q - p).norm_squared() < r2) {
                    return true;
                }
            }
        }
        false
    };
    let insert = |grid: &mut Vec<Vec<Vec2>>, p: Vec2| {
        let cx = (p.x.max(0.0) as usize / r).min(gw - 1);
        let cy = (p.y.max(0.0) as usize / r).min(gh - 1);
        grid[cy * gw + cx].push(p);
    };
    for p in existing {
        insert(&mut grid, *p);
    }
    let mut out = Vec::new();
    for (_, x, y) in cand {
        let p = Vec2::new(x as f64, y as f64);
        if blocked(&grid, &p) {
            continue;
        }
        insert(&mut grid, p);
        out.push(p);
        if out.len() >= max {
            break;
        }
    }
    out
}

fn sample(img: &GrayImage, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let a = img.at(x0, y0) * (1.0 - fx) + img.at(x0 + 1, y0) * fx;
    let b = img.at(x0, y0 + 1) * (1.0 - fx) + img.at(x0 + 1, y0 + 1) * fx;
    a * (1.0 - fy) + b * fy
}

fn patch(img: &GrayImage, c: &Vec2, r: usize) -> Option<Vec<f32>> {
    let r = r as f64;
    if c.x - r < 0.0 || c.y - r < 0.0 || c.x + r + 1.0 >= img.width as f64 || c.y + r + 1.0 >= img.height as f64 {
        return None;
    }
    let n = 2 * r as i64 + 1;
    let mut out = Vec::with_capacity((n * n) as usize);
    for dy in 0..n {
        for dx in 0..n {
            out.push(sample(img, c.x - r + dx as f64, c.y - r + dy as f64));
        }
    }
    Some(out)
}

/// Parabola vertex offset through three samples at -1, 0, 1.
fn vertex(m: f32, c: f32, p: f32) -> f64 {
    let den = m - 2.0 * c + p;
    if den <= 1e-12 {
        return 0.0;
    }
    (0.5 * (m - p) / den).clamp(-0.5, 0.5) as f64
}

fn match_point(prev: &GrayImage, next: &GrayImage, p: &Vec2, cfg: &TrackerConfig) -> Option<Vec2> {
    let r = cfg.patch_radius;
    let tpl = patch(prev, p, r)?;
    let n = 2 * r + 1;
    let s = cfg.search_radius as i64;
    let side = (2 * s + 1) as usize;
    let mut ssd = vec![f32::INFINITY; side * side];
    let (px, py) = (p.x.round() as i64, p.y.round() as i64);
    let off = p - Vec2::new(px as f64, py as f64);
    for dy in -s..=s {
        let y0 = py + dy - r as i64;
        if y0 < 0 || y0 + n as i64 > next.height as i64 {
            continue;
        }
        for dx in -s..=s {
            let x0 = px + dx - r as i64;
            if x0 < 0 || x0 + n as i64 > next.width as i64 {
                continue;
            }
            let mut acc = 0f32;
            for j in 0..n {
                let row = (y0 as usize + j) * next.width + x0 as usize;
                let t = &tpl[j * n..(j + 1) * n];
                for (i, tv) in t.iter().enumerate() {
                    let d = next.data[row + i] - tv;
                    acc += d * d;
                }
            }
            ssd[((dy + s) as usize) * side + (dx + s) as usize] = acc;
        }
    }
    let (best_i, best) = ssd
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    if !best.is_finite() {
        return None;
    }
    let (bx, by) = ((best_i % side) as i64, (best_i / side) as i64);
    if best / (n * n) as f32 > cfg.max_ssd {
        return None;
    }
    let second = ssd
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let (x, y) = ((i % side) as i64, (i / side) as i64);
            (x - bx).abs() > 1 || (y - by).abs() > 1
        })
        .map(|(_, v)| *v)
        .fold(f32::INFINITY, f32::min);
    if best > cfg.uniqueness * second {
        return None;
    }
    let at = |x: i64, y: i64| -> Option<f32> {
        (x >= 0 && y >= 0 && x < side as i64 && y < side as i64)
            .then(|| ssd[y as usize * side + x as usize])
            .filter(|v| v.is_finite())
    };
    let exact = best <= 1e-6 * (n * n) as f32;
    let sx = match (at(bx - 1, by), at(bx + 1, by)) {
        _ if exact => 0.0,
        (Some(m), Some(q)) => vertex(m, best, q),
        _ => 0.0,
    };
    let sy = match (at(bx, by - 1), at(bx, by + 1)) {
        _ if exact => 0.0,
        (Some(m), Some(q)) => vertex(m, best, q),
        _ => 0.0,
    };
    // The template was sampled at the subpixel location `p`, the search on
    // the integer grid around its rounding.
    let q = Vec2::new((px + bx - s) as f64 + sx, (py + by - s) as f64 + sy) + off;
    let margin = r as f64;
    (q.x >= margin && q.y >= margin && q.x < (next.width as f64 - margin - 1.0) && q.y < (next.height as f64 - margin - 1.0))
        .then_some(q)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Drops matches whose flow differs from the median flow of their
/// neighbours by more than the configured deviation.
pub fn reject_flow_outliers(pairs: &[(usize, Vec2, Vec2)], cfg: &TrackerConfig) -> Vec<bool> {
    let flows: Vec<Vec2> = pairs.iter().map(|(_, a, b)| b - a).collect();
    let r2 = cfg.median_radius * cfg.median_radius;
    pairs
        .iter()
        .enumerate()
        .map(|(i, (_, a, _))| {
            let mut fx = Vec::new();
            let mut fy = Vec::new();
            for (j, (_, b, _)) in pairs.iter().enumerate() {
                if (a - b).norm_squared() <= r2 {
                    fx.push(flows[j].x);
                    fy.push(flows[j].y);
                }
            }
            if fx.len() < 3 {
                return false;
            }
            let m = Vec2::new(median(&mut fx), median(&mut fy));
            (flows[i] - m).norm() <= cfg.max_flow_deviation
        })
        .collect()
}

/// Matches `prev_points` from `prev` into `next`. Returns `(index into
/// prev_points, location in next)` for the accepted matches.
pub fn track_points(prev: &GrayImage, next: &GrayImage, prev_points: &[Vec2], cfg: &TrackerConfig) -> Vec<(usize, Vec2)> {
    use rayon::prelude::*;
    if prev.width != next.width || prev.height != next.height {
        return Vec::new();
    }
    let raw: Vec<(usize, Vec2, Vec2)> = prev_points
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| match_point(prev, next, p, cfg).map(|q| (i, *p, q)))
        .collect();
    let keep = reject_flow_outliers(&raw, cfg);
    raw.into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|((i, _, q), _)| (i, q))
        .collect()
}

/// Detects corners in `prev` when `prev_points` is empty, then matches into
/// `next`. Returns `(prev pixel, next pixel)` pairs.
pub fn track_features(prev: &GrayImage, next: &GrayImage, prev_points: &[Vec2], cfg: &TrackerConfig) -> Vec<(Vec2, Vec2)> {
    let detected;
    let pts = if prev_points.is_empty() {
        detected = detect_corners(prev, &[], cfg, cfg.max_features);
        &detected
    } else {
        prev_points
    };
    track_points(prev, next, pts, cfg)
        .into_iter()
        .map(|(i, q)| (pts[i], q))
        .collect()
}

/// Frame-to-frame tracker keeping a set of live tracks.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    next_id: u64,
    frame: Option<(usize, GrayImage)>,
    live: Vec<FeatureTrack>,
    finished: Vec<FeatureTrack>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            next_id: 0,
            frame: None,
            live: Vec::new(),
            finished: Vec::new(),
        }
    }

    /// Live tracks after the latest call to [`Tracker::process`].
    pub fn live(&self) -> &[FeatureTrack] {
        &self.live
    }

    pub fn process(&mut self, frame_id: usize, img: GrayImage) -> Result<(), TrackingError> {
        if let Some((prev_id, prev)) = &self.frame {
            if frame_id <= *prev_id {
                return Err(TrackingError::NonIncreasingFrame { track_id: 0, frame_id });
            }
            let pts: Vec<Vec2> = self.live.iter().map(|t| t.newest().unwrap().pixel).collect();
            let matches = track_points(prev, &img, &pts, &self.cfg);
            let mut alive = vec![None; pts.len()];
            for (i, q) in matches {
                alive[i] = Some(q);
            }
            let mut kept = Vec::with_capacity(self.live.len());
            for (mut t, q) in std::mem::take(&mut self.live).into_iter().zip(alive) {
                match q {
                    Some(q) => {
                        t.push(Observation::new(frame_id, q))?;
                        kept.push(t);
                    }
                    None => {
                        if t.len() > 1 {
                            self.finished.push(t);
                        }
                    }
                }
            }
            self.live = kept;
        }
        let existing: Vec<Vec2> = self.live.iter().map(|t| t.newest().unwrap().pixel).collect();
        let room = self.cfg.max_features.saturating_sub(existing.len());
        for p in detect_corners(&img, &existing, &self.cfg, room) {
            let mut t = FeatureTrack::new(self.next_id);
            self.next_id += 1;
            t.push(Observation::new(frame_id, p))?;
            self.live.push(t);
        }
        self.frame = Some((frame_id, img));
        Ok(())
    }

    /// All tracks with at least two observations, sorted by id.
    pub fn into_tracks(mut self) -> Vec<FeatureTrack> {
        self.finished.extend(self.live.into_iter().filter(|t| t.len() > 1));
        self.finished.sort_by_key(|t| t.track_id);
        self.finished
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture: sum of a few random sinusoid blobs plus
    /// box-blurred noise.
    fn texture(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect();
        let mut out = vec![0f32; w * h];
        let r = 2i64;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64 {
                            acc += noise[yy as usize * w + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                out[y as usize * w + x as usize] = acc / n;
            }
        }
        GrayImage::new(w, h, out).unwrap()
    }

    fn shifted(img: &GrayImage, sx: usize) -> GrayImage {
        GrayImage::from_fn(img.width, img.height, |x, y| img.at(x.saturating_sub(sx), y))
    }

    #[test]
    fn integer_shift_is_recovered() {
        let prev = texture(320, 200, 1);
        let next = shifted(&prev, 3);
        let cfg = TrackerConfig::default();
        let m = track_features(&prev, &next, &[], &cfg);
        assert!(m.len() > 50, "{}", m.len());
        let good = m
            .iter()
            .filter(|(a, b)| ((b - a) - Vec2::new(3.0, 0.0)).norm() <= 0.5)
            .count();
        assert!(good as f64 >= 0.9 * m.len() as f64, "{good}/{}", m.len());
    }

    #[test]
    fn identical_images_have_zero_flow() {
        let img = texture(200, 150, 2);
        let m = track_features(&img, &img, &[], &TrackerConfig::default());
        assert!(!m.is_empty());
        for (a, b) in &m {
            assert!((b - a).norm() < 1e-6);
        }
    }

    #[test]
    fn noise_pair_is_mostly_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = GrayImage::from_fn(200, 150, |_, _| rng.random_range(0.0..255.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = GrayImage::from_fn(200, 150, |_, _| rng.random_range(0.0..255.0));
        let cfg = TrackerConfig::default();
        let detected = detect_corners(&a, &[], &cfg, cfg.max_features);
        let m = track_features(&a, &b, &detected, &cfg);
        assert!((m.len() as f64) < 0.2 * detected.len() as f64, "{} of {}", m.len(), detected.len());
    }

    #[test]
    fn mismatched_sizes_give_nothing() {
        let a = texture(64, 64, 5);
        let b = texture(80, 64, 5);
        assert!(track_features(&a, &b, &[], &TrackerConfig::default()).is_empty());
    }

    #[test]
    fn corners_respect_suppression_radius() {
        let img = texture(200, 150, 6);
        let cfg = TrackerConfig::default();
        let c = detect_corners(&img, &[], &cfg, 10_000);
        for (i, p) in c.iter().enumerate() {
            for q in &c[i + 1..] {
                assert!((p - q).norm() >= cfg.nms_radius as f64);
            }
        }
    }

    #[test]
    fn checkerboard_corners_are_found() {
        let img = GrayImage::from_fn(100, 100, |x, y| if (x / 20 + y / 20) % 2 == 0 { 0.0 } else { 255.0 });
        let c = detect_corners(&img, &[], &TrackerConfig::default(), 100);
        for gx in [20.0, 40.0, 60.0, 80.0] {
            for gy in [20.0, 40.0, 60.0, 80.0] {
                let g = Vec2::new(gx - 0.5, gy - 0.5);
                assert!(c.iter().any(|p| (p - g).norm() < 1.5), "missing {g:?}");
            }
        }
    }

    #[test]
    fn tracker_builds_tracks() {
        let base = texture(240, 160, 7);
        let mut tr = Tracker::new(TrackerConfig::default());
        for f in 0..4 {
            tr.process(f, shifted(&base, 2 * f)).unwrap();
        }
        assert!(tr.process(2, base.clone()).is_err());
        let tracks = tr.into_tracks();
        let long = tracks.iter().filter(|t| t.len() == 4).count();
        assert!(long > 20, "{long}");
        for t in tracks.iter().filter(|t| t.len() == 4) {
            let d = t.observations()[3].pixel - t.observations()[0].pixel;
            assert!((d - Vec2::new(6.0, 0.0)).norm() < 1.0);
        }
    }
}
