use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::Matrix3x4;

use crate::depth::{read_velodyne_bin, write_velodyne_bin};
use crate::geometry::{CameraIntrinsics, ExtrinsicCalibration, Pose, Vec3};
use crate::tracking::{ingest_tracks, write_tracks, FeatureTrack, GrayImage, SemanticImage};

use super::trajectory::{read_trajectory, write_trajectory};
use super::DatasetError;

/// Per-frame sensor data of one sequence, indexed by frame id.
pub trait FrameSource: Send + Sync {
    fn cloud(&self, frame: usize) -> Result<Vec<Vec3>, DatasetError>;
    /// Grayscale image; `None` when the sequence carries precomputed tracks.
    fn image(&self, frame: usize) -> Result<Option<GrayImage>, DatasetError>;
    fn semantics(&self, frame: usize) -> Result<Option<SemanticImage>, DatasetError>;
}

/// Everything the pipeline needs from one frame.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub frame_id: usize,
    pub timestamp: f64,
    /// LIDAR sweep in the LIDAR frame.
    pub cloud: Vec<Vec3>,
    pub image: Option<GrayImage>,
    pub semantics: Option<SemanticImage>,
}

pub struct DatasetSequence {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: ExtrinsicCalibration,
    /// Seconds, strictly increasing.
    pub timestamps: Vec<f64>,
    /// Camera-from-world, world = first camera.
    pub ground_truth: Option<Vec<Pose>>,
    /// Feature tracks from an external matcher; when present the built-in
    /// image tracker is not used.
    pub tracks: Option<Vec<FeatureTrack>>,
    pub source: Box<dyn FrameSource>,
}

impl std::fmt::Debug for DatasetSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatasetSequence")
            .field("name", &self.name)
            .field("frames", &self.len())
            .field("intrinsics", &self.intrinsics)
            .field("ground_truth", &self.ground_truth.is_some())
            .field("tracks", &self.tracks.as_ref().map(Vec::len))
            .finish()
    }
}

impl DatasetSequence {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn frame(&self, frame_id: usize) -> Result<FrameBundle, DatasetError> {
        let timestamp = *self.timestamps.get(frame_id).ok_or(DatasetError::FrameOutOfRange(frame_id))?;
        Ok(FrameBundle {
            frame_id,
            timestamp,
            cloud: self.source.cloud(frame_id)?,
            image: self.source.image(frame_id)?,
            semantics: self.source.semantics(frame_id)?,
        })
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (i, w) in self.timestamps.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(DatasetError::Malformed {
                    location: format!("{} times", self.name),
                    message: format!("timestamp of frame {} does not increase", i + 1),
                });
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.len() {
                return Err(DatasetError::Malformed {
                    location: format!("{} poses", self.name),
                    message: format!("{} poses for {} frames", gt.len(), self.len()),
                });
            }
        }
        Ok(())
    }
}

/// Reads sensor data from a KITTI odometry sequence directory.
#[derive(Debug, Clone)]
pub struct KittiSource {
    velodyne: Vec<PathBuf>,
    images: Option<Vec<PathBuf>>,
    semantics: Option<Vec<PathBuf>>,
}

impl FrameSource for KittiSource {
    fn cloud(&self, frame: usize) -> Result<Vec<Vec3>, DatasetError> {
        let path = self.velodyne.get(frame).ok_or(DatasetError::FrameOutOfRange(frame))?;
        Ok(read_velodyne_bin(path)?)
    }

    fn image(&self, frame: usize) -> Result<Option<GrayImage>, DatasetError> {
        match &self.images {
            Some(paths) => {
                let path = paths.get(frame).ok_or(DatasetError::FrameOutOfRange(frame))?;
                Ok(Some(GrayImage::load(path)?))
            }
            None => Ok(None),
        }
    }

    fn semantics(&self, frame: usize) -> Result<Option<SemanticImage>, DatasetError> {
        match &self.semantics {
            Some(paths) => {
                let path = paths.get(frame).ok_or(DatasetError::FrameOutOfRange(frame))?;
                Ok(Some(SemanticImage::load(path)?))
            }
            None => Ok(None),
        }
    }
}

/// Parsed `calib.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiCalibration {
    /// `P0`, the left grayscale camera.
    pub p0: Matrix3x4<f64>,
    /// `Tr`, LIDAR to camera 0.
    pub tr: Matrix3x4<f64>,
    /// Image size from a non-standard `size: w h` line.
    pub size: Option<(u32, u32)>,
}

pub fn parse_calibration<R: BufRead>(reader: R, origin: &Path) -> Result<KittiCalibration, DatasetError> {
    let (mut p0, mut tr, mut size) = (None, None, None);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::MalformedCalibration {
            path: origin.to_path_buf(),
            line: i + 1,
            content: text.to_string(),
            message,
        };
        let (key, rest) = text.split_once(':').ok_or_else(|| bad("expected `key: values`".into()))?;
        let vals = rest
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        let key = key.trim();
        let expected = if key == "size" { 2 } else { 12 };
        if vals.len() != expected {
            return Err(bad(format!("`{key}` needs {expected} values, found {}", vals.len())));
        }
        match key {
            "P0" => p0 = Some(Matrix3x4::from_row_slice(&vals)),
            "Tr" | "Tr_velo_to_cam" => tr = Some(Matrix3x4::from_row_slice(&vals)),
            "size" => size = Some((vals[0] as u32, vals[1] as u32)),
            _ => {}
        }
    }
    let missing = |key: &str| DatasetError::MalformedCalibration {
        path: origin.to_path_buf(),
        line: 0,
        content: String::new(),
        message: format!("no `{key}` entry"),
    };
    Ok(KittiCalibration {
        p0: p0.ok_or_else(|| missing("P0"))?,
        tr: tr.ok_or_else(|| missing("Tr"))?,
        size,
    })
}

fn require(path: PathBuf) -> Result<PathBuf, DatasetError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(DatasetError::MissingFile(path))
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, DatasetError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn parse_times(path: &Path) -> Result<Vec<f64>, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        out.push(text.parse::<f64>().map_err(|e| DatasetError::Malformed {
            location: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Loads a sequence laid out as in the KITTI odometry benchmark:
/// `calib.txt`, `times.txt`, `velodyne/*.bin` and `image_0/*.png`, with
/// optional `poses.txt` (ground truth), `semantics/*.png` (class ids) and
/// `tracks.txt` (precomputed tracks, which may replace `image_0/`).
pub fn load_kitti_sequence(dir: &Path) -> Result<DatasetSequence, DatasetError> {
    let calib_path = require(dir.join("calib.txt"))?;
    let calib = parse_calibration(BufReader::new(fs::File::open(&calib_path)?), &calib_path)?;
    let times = parse_times(&require(dir.join("times.txt"))?)?;
    let velodyne = sorted_files(&require(dir.join("velodyne"))?, "bin")?;
    let tracks_path = dir.join("tracks.txt");
    let image_dir = dir.join("image_0");
    let tracks = if tracks_path.exists() {
        Some(ingest_tracks(&tracks_path)?)
    } else {
        None
    };
    let images = if tracks.is_none() {
        Some(sorted_files(&require(image_dir)?, "png")?)
    } else {
        None
    };
    let semantic_dir = dir.join("semantics");
    let semantics = if semantic_dir.is_dir() {
        Some(sorted_files(&semantic_dir, "png")?)
    } else {
        log::info!("{}: no semantics/ directory, all tracks count as infrastructure", dir.display());
        None
    };
    let poses_path = dir.join("poses.txt");
    let ground_truth = if poses_path.exists() {
        Some(read_trajectory(&poses_path)?)
    } else {
        None
    };

    let mut counts = vec![("times.txt", times.len()), ("velodyne", velodyne.len())];
    if let Some(v) = &images {
        counts.push(("image_0", v.len()));
    }
    if let Some(v) = &semantics {
        counts.push(("semantics", v.len()));
    }
    if let Some(v) = &ground_truth {
        counts.push(("poses.txt", v.len()));
    }
    let n = counts.iter().map(|c| c.1).min().unwrap_or(0);
    if counts.iter().any(|c| c.1 != n) {
        log::warn!("{}: source lengths differ {:?}, using {} frames", dir.display(), counts, n);
    }

    let size = match (&images, calib.size) {
        (Some(paths), _) if !paths.is_empty() => {
            let (w, h) = image::image_dimensions(&paths[0]).map_err(|e| DatasetError::Malformed {
                location: paths[0].display().to_string(),
                message: e.to_string(),
            })?;
            (w, h)
        }
        (_, Some(size)) => size,
        _ => (1241, 376),
    };
    let p = &calib.p0;
    let intrinsics = CameraIntrinsics::new(p[(0, 0)], p[(1, 1)], p[(0, 2)], p[(1, 2)], size.0, size.1).map_err(|e| {
        DatasetError::MalformedCalibration {
            path: calib_path.clone(),
            line: 0,
            content: String::new(),
            message: e.to_string(),
        }
    })?;
    let extrinsics = ExtrinsicCalibration {
        lidar_to_camera: Pose::from_matrix3x4(&calib.tr),
    };

    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let seq = DatasetSequence {
        name,
        intrinsics,
        extrinsics,
        timestamps: times[..n].to_vec(),
        ground_truth: ground_truth.map(|g| g[..n].to_vec()),
        tracks,
        source: Box::new(KittiSource {
            velodyne: velodyne[..n].to_vec(),
            images: images.map(|v| v[..n].to_vec()),
            semantics: semantics.map(|v| v[..n].to_vec()),
        }),
    };
    seq.validate()?;
    Ok(seq)
}

fn format_row(m: &Matrix3x4<f64>) -> String {
    let mut v = Vec::with_capacity(12);
    for r in 0..3 {
        for c in 0..4 {
            v.push(format!("{:e}", m[(r, c)]));
        }
    }
    v.join(" ")
}

/// Writes a sequence in the layout read by [`load_kitti_sequence`]. Images
/// are written when the source has them, otherwise `tracks.txt`.
pub fn write_sequence(seq: &DatasetSequence, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir.join("velodyne"))?;
    let intr = &seq.intrinsics;
    let mut p0 = Matrix3x4::zeros();
    p0.fixed_view_mut::<3, 3>(0, 0).copy_from(&intr.matrix());
    let mut calib = fs::File::create(dir.join("calib.txt"))?;
    writeln!(calib, "P0: {}", format_row(&p0))?;
    writeln!(calib, "Tr: {}", format_row(&seq.extrinsics.lidar_to_camera.to_matrix3x4()))?;
    writeln!(calib, "size: {} {}", intr.width, intr.height)?;
    let mut times = fs::File::create(dir.join("times.txt"))?;
    for t in &seq.timestamps {
        writeln!(times, "{t:e}")?;
    }
    if let Some(gt) = &seq.ground_truth {
        write_trajectory(&dir.join("poses.txt"), gt)?;
    }
    if let Some(tracks) = &seq.tracks {
        write_tracks(std::io::BufWriter::new(fs::File::create(dir.join("tracks.txt"))?), tracks)?;
    }
    for i in 0..seq.len() {
        let name = format!("{i:06}");
        write_velodyne_bin(&dir.join("velodyne").join(format!("{name}.bin")), &seq.source.cloud(i)?)?;
        if let Some(img) = seq.source.image(i)? {
            fs::create_dir_all(dir.join("image_0"))?;
            img.to_luma()
                .save(dir.join("image_0").join(format!("{name}.png")))
                .map_err(|e| DatasetError::Malformed {
                    location: name.clone(),
                    message: e.to_string(),
                })?;
        }
        if let Some(sem) = seq.source.semantics(i)? {
            fs::create_dir_all(dir.join("semantics"))?;
            sem.save(&dir.join("semantics").join(format!("{name}.png")))?;
        }
    }
    Ok(())
}
