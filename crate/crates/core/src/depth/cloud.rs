use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::{project, CameraIntrinsics, ExtrinsicCalibration, Vec2, Vec3};

use super::DepthError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub pixel: Vec2,
    /// Camera-frame z.
    pub depth: f64,
    pub xyz: Vec3,
}

const CELL: f64 = 8.0;

/// LIDAR points in the camera frame that project into the image, bucketed
/// on a pixel grid for rectangle queries.
#[derive(Debug, Clone)]
pub struct ProjectedCloud {
    points: Vec<ProjectedPoint>,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl ProjectedCloud {
    pub fn from_points(points: Vec<ProjectedPoint>, intrinsics: &CameraIntrinsics) -> Self {
        let cols = (intrinsics.width as f64 / CELL).ceil().max(1.0) as usize;
        let rows = (intrinsics.height as f64 / CELL).ceil().max(1.0) as usize;
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, p) in points.iter().enumerate() {
            let c = ((p.pixel.x / CELL) as usize).min(cols - 1);
            let r = ((p.pixel.y / CELL) as usize).min(rows - 1);
            cells[r * cols + c].push(i as u32);
        }
        Self {
            points,
            cols,
            rows,
            cells,
        }
    }

    pub fn points(&self) -> &[ProjectedPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points whose pixel lies in the closed rectangle `center ± (half_w, half_h)`.
    pub fn query_rect(&self, center: &Vec2, half_w: f64, half_h: f64) -> Vec<ProjectedPoint> {
        let (x0, x1) = (center.x - half_w, center.x + half_w);
        let (y0, y1) = (center.y - half_h, center.y + half_h);
        let cell_range = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
            if hi < 0.0 {
                return None;
            }
            let a = (lo.max(0.0) / CELL) as usize;
            if a >= n {
                return None;
            }
            Some((a, ((hi / CELL) as usize).min(n - 1)))
        };
        let (Some((c0, c1)), Some((r0, r1))) = (cell_range(x0, x1, self.cols), cell_range(y0, y1, self.rows)) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                for &i in &self.cells[r * self.cols + c] {
                    let p = &self.points[i as usize];
                    if p.pixel.x >= x0 && p.pixel.x <= x1 && p.pixel.y >= y0 && p.pixel.y <= y1 {
                        out.push(*p);
                    }
                }
            }
        }
        out
    }
}

/// Transforms a LIDAR sweep into the camera frame and keeps the points in
/// front of the camera that project inside the image.
pub fn project_cloud(cloud: &[Vec3], calib: &ExtrinsicCalibration, intrinsics: &CameraIntrinsics) -> ProjectedCloud {
    let points = cloud
        .iter()
        .filter_map(|x| {
            let xyz = calib.lidar_to_camera.transform_point(x);
            let pixel = project(&xyz, intrinsics).ok()?;
            intrinsics.contains(&pixel).then_some(ProjectedPoint {
                pixel,
                depth: xyz.z,
                xyz,
            })
        })
        .collect();
    ProjectedCloud::from_points(points, intrinsics)
}

/// Reads a KITTI velodyne sweep: little-endian float32 `x y z intensity` records.
pub fn read_velodyne_bin(path: &Path) -> Result<Vec<Vec3>, DepthError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 16 != 0 {
        return Err(DepthError::MalformedCloud(format!(
            "{}: size {} is not a multiple of 16 bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
            Vec3::new(f(0), f(4), f(8))
        })
        .collect())
}

pub fn write_velodyne_bin(path: &Path, cloud: &[Vec3]) -> Result<(), DepthError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in cloud {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads whitespace-separated `x y z` lines; blank lines and `#` comments are skipped.
pub fn read_text_cloud(path: &Path) -> Result<Vec<Vec3>, DepthError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        match vals {
            Ok(v) if v.len() >= 3 => out.push(Vec3::new(v[0], v[1], v[2])),
            _ => {
                return Err(DepthError::MalformedCloud(format!(
                    "{}:{}: expected `x y z`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use proptest::prelude::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn axis_point_projects_to_principal_point() {
        let pc = project_cloud(&[Vec3::new(0.0, 0.0, 10.0)], &ExtrinsicCalibration::identity(), &cam());
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.points()[0].pixel, Vec2::new(320.0, 240.0));
        assert_eq!(pc.points()[0].depth, 10.0);
    }

    #[test]
    fn point_behind_camera_excluded() {
        let pc = project_cloud(&[Vec3::new(0.0, 0.0, -10.0)], &ExtrinsicCalibration::identity(), &cam());
        assert!(pc.is_empty());
    }

    #[test]
    fn wall_sweep_matches_frustum_filter() {
        // 64-beam sweep in a LIDAR frame (x forward, y left, z up) against a
        // wall 12 m ahead, with the KITTI-style axis permutation as extrinsic.
        let to_cam = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let calib = ExtrinsicCalibration {
            lidar_to_camera: Pose::from_matrix(&to_cam, Vec3::new(0.0, -0.08, -0.27)),
        };
        let mut cloud = Vec::new();
        for beam in 0..64 {
            let elev = (2.0 - beam as f64 * 0.42).to_radians();
            for az in 0..1800 {
                let azimuth = (az as f64 * 0.2 - 180.0).to_radians();
                let dir = Vec3::new(elev.cos() * azimuth.cos(), elev.cos() * azimuth.sin(), elev.sin());
                if dir.x > 1e-6 {
                    cloud.push(dir * (12.0 / dir.x));
                }
            }
        }
        let pc = project_cloud(&cloud, &calib, &cam());
        let oracle = cloud
            .iter()
            .filter(|x| {
                let c = calib.lidar_to_camera.transform_point(x);
                if c.z <= 1e-9 {
                    return false;
                }
                let u = 500.0 * c.x / c.z + 320.0;
                let v = 500.0 * c.y / c.z + 240.0;
                (0.0..640.0).contains(&u) && (0.0..480.0).contains(&v)
            })
            .count();
        assert!(oracle > 1000);
        assert_eq!(pc.len(), oracle);
        for p in pc.points() {
            assert!(p.depth > 0.0);
            assert!((project(&p.xyz, &cam()).unwrap() - p.pixel).norm() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn rect_query_matches_linear_scan(seed in 0u64..1000, cx in -20.0f64..660.0, cy in -20.0f64..500.0,
                                          hw in 0.0f64..40.0, hh in 0.0f64..40.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<ProjectedPoint> = (0..300).map(|_| {
                let pixel = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                ProjectedPoint { pixel, depth: 1.0, xyz: Vec3::new(0.0, 0.0, 1.0) }
            }).collect();
            let pc = ProjectedCloud::from_points(pts.clone(), &cam());
            let center = Vec2::new(cx, cy);
            let mut got: Vec<(u64, u64)> = pc.query_rect(&center, hw, hh).iter()
                .map(|p| (p.pixel.x.to_bits(), p.pixel.y.to_bits())).collect();
            let mut want: Vec<(u64, u64)> = pts.iter()
                .filter(|p| (p.pixel.x - cx).abs() <= hw && (p.pixel.y - cy).abs() <= hh)
                .map(|p| (p.pixel.x.to_bits(), p.pixel.y.to_bits())).collect();
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn velodyne_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000000.bin");
        let cloud = vec![Vec3::new(1.5, -2.25, 0.5), Vec3::new(10.0, 0.0, -1.75)];
        write_velodyne_bin(&path, &cloud).unwrap();
        assert_eq!(read_velodyne_bin(&path).unwrap(), cloud);
        std::fs::write(&path, [0u8; 10]).unwrap();
        assert!(matches!(read_velodyne_bin(&path), Err(DepthError::MalformedCloud(_))));
    }

    #[test]
    fn text_cloud_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.txt");
        std::fs::write(&path, "# fixture\n1 2 3\n\n4 5 6\n").unwrap();
        assert_eq!(read_text_cloud(&path).unwrap().len(), 2);
        std::fs::write(&path, "1 2\n").unwrap();
        let err = read_text_cloud(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}
