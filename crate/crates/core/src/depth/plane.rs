use nalgebra::{Matrix3, Vector2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Vec3;

use super::DepthError;

/// Plane `normal·x + offset = 0` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    /// Plane through three points, `None` if they are collinear.
    pub fn through(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Plane> {
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len < 1e-300 {
            return None;
        }
        let normal = n / len;
        Some(Plane {
            normal,
            offset: -normal.dot(a),
        }
        .facing_origin())
    }

    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.normal.dot(x) + self.offset
    }

    /// Flips the plane so the origin (the camera) lies on its positive side.
    pub fn facing_origin(self) -> Plane {
        if self.offset < 0.0 {
            Plane {
                normal: -self.normal,
                offset: -self.offset,
            }
        } else {
            self
        }
    }
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Result of the max-area triangle plane fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleFit {
    pub plane: Plane,
    pub triangle: [Vec3; 3],
    pub area: f64,
}

/// Neighbourhoods up to this size are searched exhaustively.
pub const EXHAUSTIVE_TRIANGLE_CAP: usize = 25;

fn best_triangle(points: &[Vec3], candidates: &[usize]) -> Option<(f64, [usize; 3])> {
    let mut best: Option<(f64, [usize; 3])> = None;
    for (x, &i) in candidates.iter().enumerate() {
        for (y, &j) in candidates.iter().enumerate().skip(x + 1) {
            for &k in &candidates[y + 1..] {
                let area = triangle_area(&points[i], &points[j], &points[k]);
                if best.is_none_or(|(b, _)| area > b) {
                    best = Some((area, [i, j, k]));
                }
            }
        }
    }
    best
}

/// Indices of the 2D convex hull of the points projected onto their
/// principal plane (monotone chain).
fn planar_hull(points: &[Vec3]) -> Vec<usize> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let u = eig.eigenvectors.column(order[0]).into_owned();
    let v = eig.eigenvectors.column(order[1]).into_owned();
    let flat: Vec<Vector2<f64>> = points
        .iter()
        .map(|p| {
            let d = p - centroid;
            Vector2::new(d.dot(&u), d.dot(&v))
        })
        .collect();

    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| flat[a].x.total_cmp(&flat[b].x).then(flat[a].y.total_cmp(&flat[b].y)));
    let cross = |o: usize, a: usize, b: usize| {
        (flat[a].x - flat[o].x) * (flat[b].y - flat[o].y) - (flat[a].y - flat[o].y) * (flat[b].x - flat[o].x)
    };
    let mut hull: Vec<usize> = Vec::with_capacity(2 * idx.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &usize>> = if pass == 0 {
            Box::new(idx.iter())
        } else {
            Box::new(idx.iter().rev())
        };
        for &i in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], i) <= 0.0 {
                hull.pop();
            }
            hull.push(i);
        }
        hull.pop();
    }
    hull.sort_unstable();
    hull.dedup();
    hull
}

/// Fits a plane through the three points spanning the largest triangle.
///
/// The search is exhaustive up to [`EXHAUSTIVE_TRIANGLE_CAP`] points; larger
/// sets search only the vertices of their convex hull in the dominant plane.
pub fn fit_plane_max_triangle(points: &[Vec3], min_area: f64) -> Result<TriangleFit, DepthError> {
    if points.len() < 3 {
        return Err(DepthError::TooFewPoints(points.len()));
    }
    let candidates: Vec<usize> = if points.len() <= EXHAUSTIVE_TRIANGLE_CAP {
        (0..points.len()).collect()
    } else {
        let hull = planar_hull(points);
        if hull.len() >= 3 {
            hull
        } else {
            (0..points.len()).collect()
        }
    };
    let (area, [i, j, k]) = best_triangle(points, &candidates).expect("at least three candidates");
    if area < min_area {
        return Err(DepthError::DegenerateTriangle { area });
    }
    let plane = Plane::through(&points[i], &points[j], &points[k]).ok_or(DepthError::DegenerateTriangle { area })?;
    Ok(TriangleFit {
        plane,
        triangle: [points[i], points[j], points[k]],
        area,
    })
}

/// Camera-frame z of the intersection of a line of sight with a plane.
pub fn intersect_ray_plane(ray: &Vec3, plane: &Plane) -> Result<f64, DepthError> {
    let denom = plane.normal.dot(ray);
    if denom.abs() <= 1e-9 {
        return Err(DepthError::ParallelRay);
    }
    let t = -plane.offset / denom;
    Ok((ray * t).z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub threshold: f64,
    pub min_inlier_ratio: f64,
    /// Candidate planes whose normal is further than this from the camera's
    /// vertical axis are skipped.
    pub max_tilt_deg: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            threshold: 0.15,
            min_inlier_ratio: 0.2,
            max_tilt_deg: 30.0,
            seed: 0,
        }
    }
}

/// Least-squares plane through a set of points (smallest principal axis).
pub fn fit_plane_least_squares(points: &[Vec3]) -> Option<Plane> {
    if points.len() < 3 {
        return None;
    }
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let normal = eig.eigenvectors.column(min_idx).into_owned().normalize();
    Some(
        Plane {
            normal,
            offset: -normal.dot(&centroid),
        }
        .facing_origin(),
    )
}

/// RANSAC ground plane in camera coordinates with least-squares refinement.
///
/// The returned normal points toward the camera.
pub fn extract_ground_plane(cloud: &[Vec3], cfg: &RansacConfig) -> Result<Plane, DepthError> {
    if cloud.len() < 3 {
        return Err(DepthError::InsufficientInliers {
            inliers: 0,
            total: cloud.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let min_cos = cfg.max_tilt_deg.to_radians().cos();
    let count = |plane: &Plane| cloud.iter().filter(|p| plane.signed_distance(p).abs() <= cfg.threshold).count();
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..cfg.iterations {
        let s = sample(&mut rng, cloud.len(), 3);
        let Some(plane) = Plane::through(&cloud[s.index(0)], &cloud[s.index(1)], &cloud[s.index(2)]) else {
            continue;
        };
        if plane.normal.y.abs() < min_cos {
            continue;
        }
        let n = count(&plane);
        if best.is_none_or(|(b, _)| n > b) {
            best = Some((n, plane));
        }
    }
    let Some((_, mut plane)) = best else {
        return Err(DepthError::InsufficientInliers {
            inliers: 0,
            total: cloud.len(),
        });
    };
    // Two refinement rounds: the refit can pick up inliers the sample missed.
    for _ in 0..2 {
        let inliers: Vec<Vec3> = cloud
            .iter()
            .filter(|p| plane.signed_distance(p).abs() <= cfg.threshold)
            .copied()
            .collect();
        match fit_plane_least_squares(&inliers) {
            Some(refined) => plane = refined,
            None => break,
        }
    }
    let inliers = count(&plane);
    if (inliers as f64) < cfg.min_inlier_ratio * cloud.len() as f64 {
        return Err(DepthError::InsufficientInliers {
            inliers,
            total: cloud.len(),
        });
    }
    Ok(plane)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn unit_square_triangle() {
        let pts = [
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::new(1.0, 0.0, 5.0),
            Vec3::new(1.0, 1.0, 5.0),
            Vec3::new(0.0, 1.0, 5.0),
        ];
        // All C(4,3) = 4 triples of a unit square span area 0.5.
        let fit = fit_plane_max_triangle(&pts, 1e-4).unwrap();
        assert!((fit.area - 0.5).abs() < 1e-15);
        assert!((fit.plane.normal - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((fit.plane.offset - 5.0).abs() < 1e-12);
        for v in &fit.triangle {
            assert!(fit.plane.signed_distance(v).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = [Vec3::new(0.0, 0.0, 5.0), Vec3::new(1.0, 0.0, 5.0), Vec3::new(2.0, 0.0, 5.0)];
        assert!(matches!(
            fit_plane_max_triangle(&pts, 1e-4),
            Err(DepthError::DegenerateTriangle { .. })
        ));
    }

    /// Exhaustive oracle: max area over all triples.
    fn oracle_area(pts: &[Vec3]) -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                for k in j + 1..pts.len() {
                    best = best.max(0.5 * (pts[j] - pts[i]).cross(&(pts[k] - pts[i])).norm());
                }
            }
        }
        best
    }

    #[test]
    fn random_points_on_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..10)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 5.0))
            .collect();
        let fit = fit_plane_max_triangle(&pts, 1e-4).unwrap();
        assert!((fit.plane.normal.z.abs() - 1.0).abs() < 1e-6);
        assert_eq!(fit.area, oracle_area(&pts));
    }

    #[test]
    fn matches_exhaustive_oracle_up_to_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 3..=EXHAUSTIVE_TRIANGLE_CAP {
            let pts: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..6.0)))
                .collect();
            let fit = fit_plane_max_triangle(&pts, 0.0).unwrap();
            assert_eq!(fit.area, oracle_area(&pts));
        }
    }

    #[test]
    fn hull_search_on_large_planar_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<Vec3> = (0..80)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), 3.0 + rng.random_range(-1e-3..1e-3), rng.random_range(5.0..7.0)))
            .collect();
        let fit = fit_plane_max_triangle(&pts, 1e-4).unwrap();
        assert!((fit.area - oracle_area(&pts)).abs() < 1e-2 * fit.area);
    }

    #[test]
    fn ray_plane_cases() {
        let fronto = Plane {
            normal: Vec3::new(0.0, 0.0, -1.0),
            offset: 5.0,
        };
        assert!((intersect_ray_plane(&Vec3::z(), &fronto).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(intersect_ray_plane(&Vec3::x(), &fronto), Err(DepthError::ParallelRay));
        // Tilted plane through (0,0,4), normal (0, sin20°, cos20°).
        let a = 20f64.to_radians();
        let n = Vec3::new(0.0, a.sin(), a.cos());
        let tilted = Plane {
            normal: n,
            offset: -n.dot(&Vec3::new(0.0, 0.0, 4.0)),
        };
        assert!((intersect_ray_plane(&Vec3::z(), &tilted).unwrap() - 4.0).abs() < 1e-12);
        let ray = Vec3::new(0.1, -0.2, 1.0).normalize();
        let d = intersect_ray_plane(&ray, &tilted).unwrap();
        assert!(tilted.signed_distance(&(ray * (d / ray.z))).abs() < 1e-9);
    }

    #[test]
    fn ground_plane_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut cloud: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.random_range(-15.0..15.0), 1.7, rng.random_range(2.0..40.0)))
            .collect();
        cloud.extend((0..100).map(|_| {
            Vec3::new(rng.random_range(-15.0..15.0), rng.random_range(-5.0..1.6), rng.random_range(2.0..40.0))
        }));
        let plane = extract_ground_plane(
            &cloud,
            &RansacConfig {
                threshold: 0.1,
                ..RansacConfig::default()
            },
        )
        .unwrap();
        let truth = Vec3::new(0.0, -1.0, 0.0);
        assert!(plane.normal.angle(&truth).to_degrees() < 0.5);
        assert!((plane.offset - 1.7).abs() < 0.02);
    }

    #[test]
    fn exact_ground_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cloud: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random_range(-15.0..15.0), 1.7, rng.random_range(2.0..40.0)))
            .collect();
        let plane = extract_ground_plane(&cloud, &RansacConfig::default()).unwrap();
        assert!((plane.normal - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-9);
        assert!((plane.offset - 1.7).abs() < 1e-9);
    }

    #[test]
    fn ground_plane_needs_three_points() {
        let cloud = [Vec3::new(0.0, 1.7, 5.0), Vec3::new(1.0, 1.7, 5.0)];
        assert!(matches!(
            extract_ground_plane(&cloud, &RansacConfig::default()),
            Err(DepthError::InsufficientInliers { .. })
        ));
    }
}
