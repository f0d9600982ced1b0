use std::sync::Arc;

use nalgebra::{Matrix3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{project, CameraIntrinsics, ExtrinsicCalibration, Pose, Vec2, Vec3};
use crate::tracking::{FeatureTrack, GrayImage, Observation, SemanticImage};

use super::dataset::{DatasetSequence, FrameSource};
use super::DatasetError;

/// Cityscapes ids painted into synthetic label images.
const CLASS_BUILDING: u8 = 11;
const CLASS_ROAD: u8 = 7;
const CLASS_VEGETATION: u8 = 21;
const CLASS_CAR: u8 = 26;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSegment {
    Straight { length: f64 },
    /// Constant-curvature arc; positive angles turn right.
    Turn { length: f64, angle_deg: f64 },
    Stop { duration: f64 },
}

/// Rotating multi-beam LIDAR. Beam `i` points `phi_start + i·phi_step` away
/// from straight down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarModel {
    pub beams: usize,
    pub phi_start_deg: f64,
    pub phi_step_deg: f64,
    pub azimuth_step_deg: f64,
    /// Half the horizontal field simulated around the forward direction.
    pub azimuth_half_fov_deg: f64,
    pub max_range: f64,
    /// Gaussian range noise, metres.
    pub range_noise: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            beams: 64,
            phi_start_deg: 65.0,
            phi_step_deg: 0.42,
            azimuth_step_deg: 0.16,
            azimuth_half_fov_deg: 45.0,
            max_range: 120.0,
            range_noise: 0.0,
        }
    }
}

impl LidarModel {
    /// Angle of beam `i` from the downward vertical, radians.
    pub fn beam_angle(&self, i: usize) -> f64 {
        (self.phi_start_deg + i as f64 * self.phi_step_deg).to_radians()
    }

    /// Horizontal distance at which beam `i` meets flat ground `height`
    /// below the sensor: `height · tan(φ)`.
    pub fn ground_range(&self, i: usize, height: f64) -> Option<f64> {
        let phi = self.beam_angle(i);
        (phi < std::f64::consts::FRAC_PI_2).then(|| height * phi.tan())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleSpec {
    pub count: usize,
    /// Feature points on each vehicle's rear face.
    pub points: usize,
    pub width: f64,
    pub height: f64,
    /// Gap between the road and the bottom of the rear face.
    pub clearance: f64,
    /// Lateral distance from the ego lane centre.
    pub lateral_offset: f64,
    /// Vehicle speed as a fraction of the ego speed, sampled per vehicle.
    pub speed_ratio: (f64, f64),
    /// Initial lead over the ego vehicle, metres.
    pub lead: (f64, f64),
}

impl Default for VehicleSpec {
    fn default() -> Self {
        Self {
            count: 0,
            points: 12,
            width: 1.8,
            height: 1.2,
            clearance: 0.4,
            lateral_offset: 3.0,
            speed_ratio: (0.7, 1.1),
            lead: (12.0, 40.0),
        }
    }
}

/// A street canyon along a parametric path: facades on both sides, flat
/// ground, optional vehicles driving ahead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub path: Vec<PathSegment>,
    /// Ego speed while moving, m/s.
    pub speed: f64,
    pub frame_rate: f64,
    pub corridor_half_width: f64,
    pub facade_height: f64,
    /// Camera height above the ground.
    pub camera_height: f64,
    /// Landmarks per square metre of facade.
    pub facade_density: f64,
    /// Landmarks per square metre of road.
    pub ground_density: f64,
    /// Fraction of facade panels labelled vegetation.
    pub vegetation_fraction: f64,
    /// Longest facade panel along straight segments.
    pub panel_length: f64,
    /// Longest facade panel along turns.
    pub turn_panel_length: f64,
    /// Landmarks farther than this (camera z) are not observed.
    pub max_feature_distance: f64,
    /// Image margin inside which no feature is observed, pixels.
    pub border: f64,
    pub vehicles: VehicleSpec,
    pub lidar: LidarModel,
    pub camera: CameraIntrinsics,
    /// Gaussian pixel noise on every observation.
    pub pixel_noise: f64,
    /// Probability per frame that a track breaks and restarts under a new id.
    pub track_loss: f64,
    /// Vehicle label blobs are grown by this many pixels.
    pub label_margin: i64,
}

/// KITTI odometry grayscale camera 0.
pub fn kitti_camera() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 718.856,
        fy: 718.856,
        cx: 607.1928,
        cy: 185.2157,
        width: 1241,
        height: 376,
    }
}

/// LIDAR axes (x forward, y left, z up) mounted 0.08 m above and 0.27 m
/// behind the camera.
pub fn kitti_extrinsics() -> ExtrinsicCalibration {
    let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    ExtrinsicCalibration {
        lidar_to_camera: Pose::from_matrix(&r, Vec3::new(0.0, -0.08, -0.27)),
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            path: vec![
                PathSegment::Straight { length: 80.0 },
                PathSegment::Turn {
                    length: 40.0,
                    angle_deg: 90.0,
                },
                PathSegment::Straight { length: 80.0 },
            ],
            speed: 10.0,
            frame_rate: 10.0,
            corridor_half_width: 9.0,
            facade_height: 12.0,
            camera_height: 1.65,
            facade_density: 0.12,
            ground_density: 0.08,
            vegetation_fraction: 0.2,
            panel_length: 20.0,
            turn_panel_length: 2.0,
            max_feature_distance: 80.0,
            border: 12.0,
            vehicles: VehicleSpec::default(),
            lidar: LidarModel::default(),
            camera: kitti_camera(),
            pixel_noise: 0.0,
            track_loss: 0.0,
            label_margin: 11,
        }
    }
}

impl SceneSpec {
    /// Straight corridor of the given length.
    pub fn corridor(length: f64) -> Self {
        Self {
            path: vec![PathSegment::Straight { length }],
            ..Self::default()
        }
    }

    /// Frames needed to drive the whole path.
    pub fn duration_frames(&self) -> usize {
        let secs: f64 = self
            .path
            .iter()
            .map(|s| match *s {
                PathSegment::Straight { length } | PathSegment::Turn { length, .. } => length / self.speed,
                PathSegment::Stop { duration } => duration,
            })
            .sum();
        (secs * self.frame_rate).round() as usize + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.speed > 0.0 && self.frame_rate > 0.0) {
            return Err("speed and frame_rate must be positive".into());
        }
        if !(self.corridor_half_width > 0.0 && self.facade_height > 0.0 && self.camera_height > 0.0) {
            return Err("corridor dimensions must be positive".into());
        }
        if !(self.panel_length > 0.0 && self.turn_panel_length > 0.0) {
            return Err("panel lengths must be positive".into());
        }
        for seg in &self.path {
            match *seg {
                PathSegment::Straight { length } if !(length >= 0.0) => {
                    return Err(format!("negative segment length {length}"));
                }
                PathSegment::Turn { length, angle_deg } => {
                    if !(length > 0.0) {
                        return Err(format!("turn length must be positive, got {length}"));
                    }
                    let radius = length / angle_deg.to_radians().abs();
                    if radius <= self.corridor_half_width {
                        return Err(format!(
                            "turn radius {radius:.2} m does not clear the corridor half width {}",
                            self.corridor_half_width
                        ));
                    }
                }
                PathSegment::Stop { duration } if !(duration >= 0.0) => {
                    return Err(format!("negative stop duration {duration}"));
                }
                _ => {}
            }
        }
        if !(0.0..=1.0).contains(&self.track_loss) || !(0.0..=1.0).contains(&self.vegetation_fraction) {
            return Err("track_loss and vegetation_fraction must lie in [0, 1]".into());
        }
        if !(self.pixel_noise >= 0.0 && self.lidar.range_noise >= 0.0) {
            return Err("noise levels must be non-negative".into());
        }
        self.camera.validate().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurfaceKind {
    Facade,
    Vegetation,
    Ground,
    Vehicle,
}

impl SurfaceKind {
    fn class(self) -> u8 {
        match self {
            SurfaceKind::Facade => CLASS_BUILDING,
            SurfaceKind::Vegetation => CLASS_VEGETATION,
            SurfaceKind::Ground => CLASS_ROAD,
            SurfaceKind::Vehicle => CLASS_CAR,
        }
    }
}

/// Point on the path centreline: position on the ground plane (x, z) and heading.
#[derive(Debug, Clone, Copy)]
struct Station {
    x: f64,
    z: f64,
    heading: f64,
}

impl Station {
    fn forward(&self) -> Vec3 {
        Vec3::new(self.heading.sin(), 0.0, self.heading.cos())
    }

    fn right(&self) -> Vec3 {
        Vec3::new(self.heading.cos(), 0.0, -self.heading.sin())
    }

    fn point(&self, lateral: f64, y: f64) -> Vec3 {
        Vec3::new(self.x, y, self.z) + self.right() * lateral
    }
}

/// Centreline as a function of arc length. Beyond both ends it continues straight.
#[derive(Debug, Clone)]
struct Centerline {
    /// `(start arc length, start station, length, curvature)` per moving segment.
    pieces: Vec<(f64, Station, f64, f64)>,
    length: f64,
}

impl Centerline {
    fn new(path: &[PathSegment]) -> Self {
        let mut pieces = Vec::new();
        let mut st = Station {
            x: 0.0,
            z: 0.0,
            heading: 0.0,
        };
        let mut s0 = 0.0;
        for seg in path {
            let (len, kappa) = match *seg {
                PathSegment::Straight { length } => (length, 0.0),
                PathSegment::Turn { length, angle_deg } => (length, angle_deg.to_radians() / length),
                PathSegment::Stop { .. } => continue,
            };
            if len <= 0.0 {
                continue;
            }
            pieces.push((s0, st, len, kappa));
            st = advance(&st, len, kappa);
            s0 += len;
        }
        Self { pieces, length: s0 }
    }

    fn at(&self, s: f64) -> Station {
        let origin = Station {
            x: 0.0,
            z: 0.0,
            heading: 0.0,
        };
        let (Some(first), Some(&(s0, st, len, kappa))) = (self.pieces.first(), self.pieces.last()) else {
            return advance(&origin, s, 0.0);
        };
        if s <= 0.0 {
            return advance(&first.1, s, 0.0);
        }
        for &(s0, st, len, kappa) in &self.pieces {
            if s <= s0 + len {
                return advance(&st, s - s0, kappa);
            }
        }
        advance(&advance(&st, len, kappa), s - s0 - len, 0.0)
    }

    /// Arc lengths where facade panels start and end.
    fn breakpoints(&self, from: f64, to: f64, straight: f64, turn: f64) -> Vec<f64> {
        let mut out = vec![from];
        let push_run = |a: f64, b: f64, step: f64, out: &mut Vec<f64>| {
            if b <= a {
                return;
            }
            let n = ((b - a) / step).ceil().max(1.0) as usize;
            for k in 1..=n {
                out.push(a + (b - a) * k as f64 / n as f64);
            }
        };
        let first = self.pieces.first().map_or(0.0, |p| p.0);
        push_run(from, first.min(to), straight, &mut out);
        for &(s0, _, len, kappa) in &self.pieces {
            let step = if kappa == 0.0 { straight } else { turn };
            push_run(s0.max(from), (s0 + len).min(to), step, &mut out);
        }
        push_run(self.length.max(from), to, straight, &mut out);
        out.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        out
    }
}

fn advance(st: &Station, ds: f64, kappa: f64) -> Station {
    if kappa.abs() < 1e-12 {
        let f = st.forward();
        return Station {
            x: st.x + f.x * ds,
            z: st.z + f.z * ds,
            heading: st.heading,
        };
    }
    let h1 = st.heading + kappa * ds;
    Station {
        x: st.x + (st.heading.cos() - h1.cos()) / kappa,
        z: st.z + (h1.sin() - st.heading.sin()) / kappa,
        heading: h1,
    }
}

/// Planar rectangle `origin + a·u + b·v`, `a, b ∈ [0, 1]`, with `u ⟂ v`.
#[derive(Debug, Clone, Copy)]
struct Panel {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    normal: Vec3,
    kind: SurfaceKind,
}

impl Panel {
    fn new(origin: Vec3, u: Vec3, v: Vec3, kind: SurfaceKind) -> Self {
        Self {
            origin,
            u,
            v,
            normal: u.cross(&v).normalize(),
            kind,
        }
    }

    fn at(&self, a: f64, b: f64) -> Vec3 {
        self.origin + self.u * a + self.v * b
    }

    fn center(&self) -> Vec3 {
        self.at(0.5, 0.5)
    }

    fn radius(&self) -> f64 {
        0.5 * (self.u + self.v).norm().max((self.u - self.v).norm())
    }

    /// Ray parameter of the hit, if any.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.origin - o)) / denom;
        if t <= 0.0 {
            return None;
        }
        let rel = o + d * t - self.origin;
        let a = rel.dot(&self.u) / self.u.norm_squared();
        let b = rel.dot(&self.v) / self.v.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
    }
}

#[derive(Debug, Clone)]
struct Vehicle {
    start: f64,
    speed: f64,
    lateral: f64,
}

#[derive(Debug, Clone, Copy)]
enum Anchor {
    /// Fixed point on the ground.
    Static(Vec3),
    /// Fixed point on a facade panel.
    Panel(usize, Vec3),
    /// Vehicle index and face coordinates.
    Vehicle(usize, f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct SceneLandmark {
    anchor: Anchor,
    kind: SurfaceKind,
}

/// Everything needed to regenerate any frame of a synthetic sequence.
#[derive(Debug)]
struct World {
    spec: SceneSpec,
    seed: u64,
    centerline: Centerline,
    panels: Vec<Panel>,
    vehicles: Vec<Vehicle>,
    landmarks: Vec<SceneLandmark>,
    /// Camera-to-world per frame.
    cameras: Vec<Pose>,
    times: Vec<f64>,
    extrinsics: ExtrinsicCalibration,
    /// `(pixel, kind)` of every observation, per frame.
    observed: Vec<Vec<(Vec2, SurfaceKind)>>,
}

fn rotation_for_heading(heading: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(Vec3::new(0.0, heading, 0.0))
}

impl World {
    fn ground_y(&self) -> f64 {
        self.spec.camera_height
    }

    fn vehicle_panel(&self, idx: usize, t: f64) -> Panel {
        let veh = &self.vehicles[idx];
        let vs = &self.spec.vehicles;
        let st = self.centerline.at(veh.start + veh.speed * t);
        let bottom = self.ground_y() - vs.clearance;
        let origin = st.point(veh.lateral - 0.5 * vs.width, bottom);
        Panel::new(origin, st.right() * vs.width, Vec3::new(0.0, -vs.height, 0.0), SurfaceKind::Vehicle)
    }

    fn landmark_position(&self, idx: usize, t: f64) -> Vec3 {
        match self.landmarks[idx].anchor {
            Anchor::Static(p) | Anchor::Panel(_, p) => p,
            Anchor::Vehicle(v, a, b) => self.vehicle_panel(v, t).at(a, b),
        }
    }

    /// Panels that may be hit from `o` within `range`.
    fn nearby(&self, o: &Vec3, range: f64, t: f64) -> Vec<Panel> {
        let mut out: Vec<Panel> = self
            .panels
            .iter()
            .filter(|p| (p.center() - o).norm() <= range + p.radius())
            .copied()
            .collect();
        for i in 0..self.vehicles.len() {
            let p = self.vehicle_panel(i, t);
            if (p.center() - o).norm() <= range + p.radius() {
                out.push(p);
            }
        }
        out
    }

    /// Nearest surface along a ray, with its kind.
    fn cast(&self, panels: &[Panel], o: &Vec3, d: &Vec3) -> Option<(f64, SurfaceKind)> {
        let mut best: Option<(f64, SurfaceKind)> = None;
        if d.y > 1e-12 {
            let t = (self.ground_y() - o.y) / d.y;
            if t > 0.0 {
                best = Some((t, SurfaceKind::Ground));
            }
        }
        for p in panels {
            if let Some(t) = p.intersect(o, d) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, p.kind));
                }
            }
        }
        best
    }

    fn frame_rng(&self, frame: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream * 1_000_003 + frame as u64 + 1);
        rng
    }

    fn sweep(&self, frame: usize) -> Vec<Vec3> {
        let lidar = &self.spec.lidar;
        let l2w = self.cameras[frame] * self.extrinsics.lidar_to_camera;
        let o = l2w.translation;
        let panels = self.nearby(&o, lidar.max_range, self.times[frame]);
        let mut rng = self.frame_rng(frame, 1);
        let noise = Normal::new(0.0, lidar.range_noise.max(f64::MIN_POSITIVE)).unwrap();
        let steps = (lidar.azimuth_half_fov_deg / lidar.azimuth_step_deg).floor() as i64;
        let mut out = Vec::new();
        for k in -steps..=steps {
            let az = (k as f64 * lidar.azimuth_step_deg).to_radians();
            for i in 0..lidar.beams {
                let phi = lidar.beam_angle(i);
                let dir = Vec3::new(phi.sin() * az.cos(), phi.sin() * az.sin(), -phi.cos());
                let dw = l2w.rotation * dir;
                if let Some((t, _)) = self.cast(&panels, &o, &dw) {
                    if t <= lidar.max_range {
                        let r = if lidar.range_noise > 0.0 { t + noise.sample(&mut rng) } else { t };
                        out.push(dir * r);
                    }
                }
            }
        }
        out
    }

    fn labels(&self, frame: usize) -> SemanticImage {
        let cam = &self.spec.camera;
        let (w, h) = (cam.width as usize, cam.height as usize);
        let mut img = SemanticImage::filled(w, h, CLASS_BUILDING);
        for (px, kind) in &self.observed[frame] {
            if matches!(kind, SurfaceKind::Ground | SurfaceKind::Vegetation) {
                let (x, y) = (px.x.round() as i64, px.y.round() as i64);
                img.fill_rect(x - 1, y - 1, x + 2, y + 2, kind.class());
            }
        }
        let w2c = self.cameras[frame].inverse();
        let m = self.spec.label_margin;
        for v in 0..self.vehicles.len() {
            let p = self.vehicle_panel(v, self.times[frame]);
            let corners: Vec<Vec3> = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
                .iter()
                .map(|&(a, b)| w2c.transform_point(&p.at(a, b)))
                .collect();
            if corners.iter().any(|c| c.z < 0.5) {
                continue;
            }
            let px: Vec<Vec2> = corners.iter().filter_map(|c| project(c, cam).ok()).collect();
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for q in &px {
                x0 = x0.min(q.x);
                y0 = y0.min(q.y);
                x1 = x1.max(q.x);
                y1 = y1.max(q.y);
            }
            img.fill_rect(
                x0.floor() as i64 - m,
                y0.floor() as i64 - m,
                x1.ceil() as i64 + m + 1,
                y1.ceil() as i64 + m + 1,
                CLASS_CAR,
            );
        }
        img
    }
}

struct SyntheticSource {
    world: Arc<World>,
}

impl FrameSource for SyntheticSource {
    fn cloud(&self, frame: usize) -> Result<Vec<Vec3>, DatasetError> {
        if frame >= self.world.cameras.len() {
            return Err(DatasetError::FrameOutOfRange(frame));
        }
        Ok(self.world.sweep(frame))
    }

    fn image(&self, _frame: usize) -> Result<Option<GrayImage>, DatasetError> {
        Ok(None)
    }

    fn semantics(&self, frame: usize) -> Result<Option<SemanticImage>, DatasetError> {
        if frame >= self.world.cameras.len() {
            return Err(DatasetError::FrameOutOfRange(frame));
        }
        Ok(Some(self.world.labels(frame)))
    }
}

/// A generated sequence plus the ground truth behind it.
pub struct SyntheticScene {
    pub sequence: DatasetSequence,
    world: Arc<World>,
    /// Scene landmark behind each track id.
    track_landmark: Vec<usize>,
}

impl std::fmt::Debug for SyntheticScene {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyntheticScene")
            .field("sequence", &self.sequence)
            .field("landmarks", &self.world.landmarks.len())
            .finish()
    }
}

impl SyntheticScene {
    pub fn landmark_count(&self) -> usize {
        self.world.landmarks.len()
    }

    /// World position of the point behind `track_id` at `frame`.
    pub fn track_point(&self, track_id: u64, frame: usize) -> Option<Vec3> {
        let idx = *self.track_landmark.get(track_id as usize)?;
        Some(self.world.landmark_position(idx, *self.world.times.get(frame)?))
    }

    pub fn track_kind(&self, track_id: u64) -> Option<SurfaceKind> {
        let idx = *self.track_landmark.get(track_id as usize)?;
        Some(self.world.landmarks[idx].kind)
    }

    /// Camera-frame depth of the point behind `track_id` at `frame`.
    pub fn true_depth(&self, track_id: u64, frame: usize) -> Option<f64> {
        let p = self.track_point(track_id, frame)?;
        Some(self.world.cameras.get(frame)?.inverse().transform_point(&p).z)
    }

    /// Supporting plane `(unit normal, point)` of the surface behind `track_id`.
    pub fn track_plane(&self, track_id: u64, frame: usize) -> Option<(Vec3, Vec3)> {
        let idx = *self.track_landmark.get(track_id as usize)?;
        let t = *self.world.times.get(frame)?;
        let p = self.world.landmark_position(idx, t);
        let normal = match self.world.landmarks[idx].anchor {
            Anchor::Vehicle(v, _, _) => self.world.vehicle_panel(v, t).normal,
            Anchor::Panel(pi, _) => self.world.panels[pi].normal,
            Anchor::Static(_) => Vec3::new(0.0, -1.0, 0.0),
        };
        Some((normal, p))
    }
}

fn landmark_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Builds a synthetic sequence of `frames` frames. Equal seeds give
/// identical sequences.
pub fn generate_scene(spec: &SceneSpec, frames: usize, seed: u64) -> Result<SyntheticScene, DatasetError> {
    spec.validate().map_err(DatasetError::InvalidScene)?;
    let mut rng = landmark_rng(seed);
    let centerline = Centerline::new(&spec.path);
    let w = spec.corridor_half_width;
    let g = spec.camera_height;

    // Ego timeline: arc length at each frame.
    let mut arc = Vec::with_capacity(frames);
    let mut times = Vec::with_capacity(frames);
    for k in 0..frames {
        let t = k as f64 / spec.frame_rate;
        times.push(t);
        let (mut left, mut s) = (t, 0.0);
        for seg in &spec.path {
            let (dur, len) = match *seg {
                PathSegment::Straight { length } | PathSegment::Turn { length, .. } => (length / spec.speed, length),
                PathSegment::Stop { duration } => (duration, 0.0),
            };
            if left <= dur {
                s += if dur > 0.0 { len * left / dur } else { 0.0 };
                break;
            }
            left -= dur;
            s += len;
        }
        arc.push(s);
    }
    let cameras: Vec<Pose> = arc
        .iter()
        .map(|&s| {
            let st = centerline.at(s);
            Pose::new(rotation_for_heading(st.heading), st.point(0.0, 0.0))
        })
        .collect();

    let reach = spec.lidar.max_range.max(spec.max_feature_distance) + 30.0;
    let s_max = arc.last().copied().unwrap_or(0.0).max(centerline.length) + reach;
    let s_min = -30.0;
    let breaks = centerline.breakpoints(s_min, s_max, spec.panel_length, spec.turn_panel_length);
    let mut panels = Vec::new();
    let up = Vec3::new(0.0, -spec.facade_height, 0.0);
    for pair in breaks.windows(2) {
        let (a, b) = (centerline.at(pair[0]), centerline.at(pair[1]));
        for side in [-w, w] {
            let kind = if rng.random_bool(spec.vegetation_fraction) {
                SurfaceKind::Vegetation
            } else {
                SurfaceKind::Facade
            };
            let (p0, p1) = (a.point(side, g), b.point(side, g));
            panels.push(Panel::new(p0, p1 - p0, up, kind));
        }
    }

    let mut landmarks = Vec::new();
    for (pi, p) in panels.iter().enumerate() {
        let area = p.u.norm() * p.v.norm();
        let n = (area * spec.facade_density + rng.random_range(0.0..1.0)).floor() as usize;
        for _ in 0..n {
            let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.02..1.0));
            landmarks.push(SceneLandmark {
                anchor: Anchor::Panel(pi, p.at(a, b)),
                kind: p.kind,
            });
        }
    }
    let ground_count = ((s_max - s_min) * 2.0 * w * spec.ground_density).round() as usize;
    for _ in 0..ground_count {
        let s = rng.random_range(s_min..s_max);
        let lat = rng.random_range(-w + 0.5..w - 0.5);
        landmarks.push(SceneLandmark {
            anchor: Anchor::Static(centerline.at(s).point(lat, g)),
            kind: SurfaceKind::Ground,
        });
    }
    let vs = &spec.vehicles;
    let mut vehicles = Vec::new();
    for i in 0..vs.count {
        let start = arc.first().copied().unwrap_or(0.0) + rng.random_range(vs.lead.0..=vs.lead.1);
        let speed = spec.speed * rng.random_range(vs.speed_ratio.0..=vs.speed_ratio.1);
        let lateral = if i % 2 == 0 { vs.lateral_offset } else { -vs.lateral_offset };
        for _ in 0..vs.points {
            let (a, b) = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
            landmarks.push(SceneLandmark {
                anchor: Anchor::Vehicle(i, a, b),
                kind: SurfaceKind::Vehicle,
            });
        }
        vehicles.push(Vehicle { start, speed, lateral });
    }

    let mut world = World {
        spec: spec.clone(),
        seed,
        centerline,
        panels,
        vehicles,
        landmarks,
        cameras,
        times,
        extrinsics: kitti_extrinsics(),
        observed: Vec::new(),
    };

    // Observations and tracks.
    let cam = spec.camera;
    let pixel_noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut current: Vec<Option<u64>> = vec![None; world.landmarks.len()];
    let mut tracks: Vec<FeatureTrack> = Vec::new();
    let mut track_landmark = Vec::new();
    let mut observed = Vec::with_capacity(frames);
    for k in 0..frames {
        let c2w = world.cameras[k];
        let w2c = c2w.inverse();
        let o = c2w.translation;
        let t = world.times[k];
        let panels = world.nearby(&o, spec.max_feature_distance * 1.5, t);
        let mut obs_rng = world.frame_rng(k, 2);
        let mut frame_obs = Vec::new();
        for idx in 0..world.landmarks.len() {
            let x = world.landmark_position(idx, t);
            let xc = w2c.transform_point(&x);
            let visible = xc.z > 0.5
                && xc.z <= spec.max_feature_distance
                && project(&xc, &cam).is_ok_and(|px| {
                    px.x >= spec.border
                        && px.y >= spec.border
                        && px.x <= cam.width as f64 - 1.0 - spec.border
                        && px.y <= cam.height as f64 - 1.0 - spec.border
                })
                && {
                    let d = x - o;
                    let dist = d.norm();
                    world
                        .cast(&panels, &o, &(d / dist))
                        .is_none_or(|(hit, _)| hit >= dist * (1.0 - 1e-9) - 1e-9)
                };
            if !visible {
                current[idx] = None;
                continue;
            }
            let lost = spec.track_loss > 0.0 && obs_rng.random_bool(spec.track_loss);
            let id = match current[idx] {
                Some(id) if !lost => id,
                _ => {
                    let id = tracks.len() as u64;
                    tracks.push(FeatureTrack::new(id));
                    track_landmark.push(idx);
                    id
                }
            };
            current[idx] = Some(id);
            let mut px = project(&xc, &cam).expect("checked above");
            if spec.pixel_noise > 0.0 {
                px += Vec2::new(pixel_noise.sample(&mut obs_rng), pixel_noise.sample(&mut obs_rng));
            }
            tracks[id as usize]
                .push(Observation::new(k, px))
                .expect("frames are visited in order");
            frame_obs.push((px, world.landmarks[idx].kind));
        }
        observed.push(frame_obs);
    }
    world.observed = observed;

    let world = Arc::new(world);
    let sequence = DatasetSequence {
        name: format!("synthetic-{seed}"),
        intrinsics: cam,
        extrinsics: world.extrinsics,
        timestamps: world.times.clone(),
        ground_truth: Some(world.cameras.iter().map(Pose::inverse).collect()),
        tracks: Some(tracks),
        source: Box::new(SyntheticSource { world: world.clone() }),
    };
    Ok(SyntheticScene {
        sequence,
        world,
        track_landmark,
    })
}
