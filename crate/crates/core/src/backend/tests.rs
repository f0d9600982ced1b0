use super::*;
use crate::geometry::{project, Vec2};
use crate::solver::{LmOptions, Problem, ResidualTag, RobustLoss, TrimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn intr() -> CameraIntrinsics {
    CameraIntrinsics::new(718.0, 718.0, 607.0, 185.0, 1241, 376).unwrap()
}

struct Scene {
    truth: Vec<Pose>,
    points: Vec<Vec3>,
    keyframes: Vec<Keyframe>,
    landmarks: Vec<Landmark>,
}

struct Noise {
    pixel: f64,
    range: f64,
    depth_outliers: f64,
    pixel_outliers: f64,
}

const CLEAN: Noise = Noise {
    pixel: 0.0,
    range: 0.0,
    depth_outliers: 0.0,
    pixel_outliers: 0.0,
};

/// Five keyframes driving forward 1 m apart with a slight turn; landmarks
/// seen in every keyframe, a fraction with depth.
fn scene(seed: u64, n: usize, depth_fraction: f64, noise: &Noise) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<Pose> = (0..5)
        .map(|i| {
            let yaw = 0.01 * i as f64;
            let center = Vec3::new(0.05 * (i * i) as f64, 0.0, i as f64);
            let r = Pose::from_axis_angle(Vec3::new(0.0, yaw, 0.0), Vec3::zeros());
            Pose::new(r.rotation, -(r.rotation * center))
        })
        .collect();
    let mut points = Vec::new();
    let mut landmarks = Vec::new();
    let px = Normal::new(0.0, noise.pixel.max(1e-300)).unwrap();
    let rg = Normal::new(0.0, noise.range.max(1e-300)).unwrap();
    while landmarks.len() < n {
        let z = rng.random_range(8.0..40.0);
        let p = Vec3::new(rng.random_range(-0.5..0.5) * z, rng.random_range(-0.2..0.2) * z, z + 4.0);
        let mut obs = Vec::new();
        let with_depth = rng.random_bool(depth_fraction);
        for (f, pose) in truth.iter().enumerate() {
            let cam = pose.transform_point(&p);
            let Ok(mut pixel) = project(&cam, &intr()) else { break };
            if !intr().contains(&pixel) {
                break;
            }
            if noise.pixel > 0.0 {
                pixel += Vec2::new(px.sample(&mut rng), px.sample(&mut rng));
            }
            if rng.random_bool(noise.pixel_outliers) {
                pixel += Vec2::new(20.0, -15.0);
            }
            let depth = (with_depth && cam.z <= 30.0).then(|| {
                let mut d = cam.z + if noise.range > 0.0 { rg.sample(&mut rng) } else { 0.0 };
                if rng.random_bool(noise.depth_outliers) {
                    d += 3.0;
                }
                d
            });
            obs.push(LandmarkObservation {
                frame_id: f,
                pixel,
                depth,
            });
        }
        if obs.len() < truth.len() {
            continue;
        }
        landmarks.push(Landmark {
            track_id: landmarks.len() as u64,
            position: p,
            bin: Bin::Near,
            weight: 1.0,
            observations: obs,
        });
        points.push(p);
    }
    let keyframes = truth
        .iter()
        .enumerate()
        .map(|(i, p)| Keyframe {
            frame_id: i,
            timestamp: i as f64 * 0.3,
            pose: *p,
            category: KeyframeCategory::Sparsified,
        })
        .collect();
    Scene {
        truth,
        points,
        keyframes,
        landmarks,
    }
}

fn exact_trim() -> TrimConfig {
    TrimConfig {
        time_bound_ms: None,
        final_iterations: 200,
        ..TrimConfig::default()
    }
}

fn perturb(kf: &mut [Keyframe], rng: &mut ChaCha8Rng, meters: f64, degrees: f64) {
    for k in kf.iter_mut().skip(1) {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let d = Pose::from_axis_angle(axis * degrees.to_radians(), dir * meters);
        k.pose = d.compose(&k.pose);
    }
}

fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    ((a.center() - b.center()).norm(), a.inverse().compose(b).rotation_angle().to_degrees())
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let mut s = scene(1, 200, 0.3, &CLEAN);
    let target = capture_scale(&s.keyframes, &WindowConfig::default());
    let sum = build_and_solve_window(
        &mut s.keyframes,
        &mut s.landmarks,
        target,
        &intr(),
        &WindowConfig::default(),
        &exact_trim(),
        &LmOptions::default(),
    )
    .unwrap();
    assert!(sum.solver.solver.final_cost < 1e-12, "{}", sum.solver.solver.final_cost);
    for (k, t) in s.keyframes.iter().zip(&s.truth) {
        assert!((k.pose.translation - t.translation).norm() < 1e-9);
        assert!(k.pose.rotation.angle_to(&t.rotation) < 1e-9);
    }
    for l in &s.landmarks {
        assert!((l.position - s.points[l.track_id as usize]).norm() < 1e-9);
    }
}

#[test]
fn perturbed_window_recovers_truth() {
    let mut s = scene(2, 200, 0.3, &CLEAN);
    let target = capture_scale(&s.keyframes, &WindowConfig::default());
    let oldest = s.keyframes[0].pose;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    perturb(&mut s.keyframes, &mut rng, 0.05, 0.5);
    build_and_solve_window(
        &mut s.keyframes,
        &mut s.landmarks,
        target,
        &intr(),
        &WindowConfig::default(),
        &exact_trim(),
        &LmOptions::default(),
    )
    .unwrap();
    // The gauge pose is untouched, bit for bit.
    assert_eq!(s.keyframes[0].pose, oldest);
    for (k, t) in s.keyframes.iter().zip(&s.truth) {
        let (dt, dr) = pose_error(&k.pose, t);
        assert!(dt < 1e-4 && dr < 0.01, "{dt} m {dr} deg");
    }
}

#[test]
fn without_depth_scale_follows_regularizer() {
    let mut s = scene(3, 150, 0.0, &CLEAN);
    let cfg = WindowConfig::default();
    let target = capture_scale(&s.keyframes, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    perturb(&mut s.keyframes, &mut rng, 0.05, 0.5);
    let sum = build_and_solve_window(&mut s.keyframes, &mut s.landmarks, Some(target), &intr(), &cfg, &exact_trim(), &LmOptions::default())
        .unwrap();
    assert_eq!(sum.depth_blocks, 0);
    let s_hat = translation_length(&s.keyframes[0].pose, &s.keyframes[1].pose, true);
    assert!((s_hat - target).abs() < 1e-9, "{s_hat} vs {target}");
}

#[test]
fn depth_recovers_injected_scale_error() {
    let mut s = scene(4, 150, 0.3, &CLEAN);
    let cfg = WindowConfig::default();
    // Inflate the whole reconstruction by 5 % about the oldest camera.
    let c0 = s.keyframes[0].pose.center();
    for k in s.keyframes.iter_mut() {
        let c = c0 + (k.pose.center() - c0) * 1.05;
        k.pose = Pose::new(k.pose.rotation, -(k.pose.rotation * c));
    }
    for l in s.landmarks.iter_mut() {
        l.position = c0 + (l.position - c0) * 1.05;
    }
    let depth_count: usize = s.landmarks.iter().map(Landmark::depth_count).sum();
    assert!(depth_count >= 10);
    let target = capture_scale(&s.keyframes, &cfg);
    build_and_solve_window(&mut s.keyframes, &mut s.landmarks, target, &intr(), &cfg, &exact_trim(), &LmOptions::default()).unwrap();
    let est = (s.keyframes[4].pose.center() - s.keyframes[0].pose.center()).norm();
    let truth = (s.truth[4].center() - s.truth[0].center()).norm();
    assert!((est / truth - 1.0).abs() < 0.005, "{}", est / truth);
}

#[test]
fn common_landmark_weight_leaves_argmin() {
    let cfg = WindowConfig::default();
    let solve = |factor: f64| {
        let mut s = scene(5, 120, 0.3, &CLEAN);
        let target = capture_scale(&s.keyframes, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        perturb(&mut s.keyframes, &mut rng, 0.05, 0.5);
        for l in s.landmarks.iter_mut() {
            l.weight *= factor;
        }
        build_and_solve_window(&mut s.keyframes, &mut s.landmarks, target, &intr(), &cfg, &exact_trim(), &LmOptions::default()).unwrap();
        s.keyframes
    };
    let a = solve(1.0);
    let b = solve(0.5);
    for (x, y) in a.iter().zip(&b) {
        assert!((x.pose.translation - y.pose.translation).norm() < 1e-9);
        assert!(x.pose.rotation.angle_to(&y.pose.rotation) < 1e-9);
    }
}

#[test]
fn reprojection_only_cost_is_scale_blind() {
    let s = scene(6, 100, 0.0, &Noise { pixel: 1.0, ..CLEAN });
    let cost_at = |scale: f64| {
        let mut p = Problem::new();
        let poses: Vec<_> = s
            .keyframes
            .iter()
            .map(|k| p.add_pose(Pose::new(k.pose.rotation, k.pose.translation * scale)))
            .collect();
        for l in &s.landmarks {
            let pid = p.add_point(l.position * scale);
            for o in &l.observations {
                p.add_residual(
                    Box::new(ReprojectionCost { observed: o.pixel, intrinsics: intr() }),
                    &[poses[o.frame_id], pid],
                    RobustLoss::cauchy(1.0),
                    1.0,
                    ResidualTag::Reprojection,
                )
                .unwrap();
            }
        }
        p.cost().unwrap()
    };
    let (a, b) = (cost_at(1.0), cost_at(2.0));
    assert!(a > 1.0);
    assert!((a - b).abs() < 1e-12 * a.max(1.0), "{a} {b}");
}

#[test]
fn trimming_removes_gross_outliers() {
    let cfg = WindowConfig::default();
    let noise = Noise {
        depth_outliers: 0.04,
        pixel_outliers: 0.04,
        ..CLEAN
    };
    for seed in 0..10 {
        let run = |rl: f64| {
            let mut s = scene(100 + seed, 200, 0.3, &noise);
            let target = capture_scale(&s.keyframes, &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            perturb(&mut s.keyframes, &mut rng, 0.02, 0.2);
            let trim = TrimConfig {
                rejection_percent: rl,
                ..exact_trim()
            };
            build_and_solve_window(&mut s.keyframes, &mut s.landmarks, target, &intr(), &cfg, &trim, &LmOptions::default())
                .unwrap();
            s.keyframes
                .iter()
                .zip(&s.truth)
                .map(|(k, t)| pose_error(&k.pose, t).0)
                .fold(0.0, f64::max)
        };
        let (trimmed, plain) = (run(10.0), run(0.0));
        assert!(trimmed < 1e-6, "seed {seed}: {trimmed}");
        assert!(trimmed < plain, "seed {seed}: {trimmed} vs {plain}");
    }
}

#[test]
fn initial_position_prefers_depth() {
    let poses: HashMap<usize, Pose> = (0..3)
        .map(|i| (i, Pose::from_translation(Vec3::new(-(i as f64), 0.0, 0.0))))
        .collect();
    let p = Vec3::new(1.0, 0.5, 12.0);
    let obs: Vec<LandmarkObservation> = (0..3)
        .map(|i| LandmarkObservation {
            frame_id: i,
            pixel: project(&poses[&i].transform_point(&p), &intr()).unwrap(),
            depth: None,
        })
        .collect();
    let tri = initial_position(&obs, &poses, &intr()).unwrap();
    assert!((tri - p).norm() < 1e-6);
    let mut with_depth = obs.clone();
    with_depth[1].depth = Some(poses[&1].transform_point(&p).z + 0.5);
    let d = initial_position(&with_depth, &poses, &intr()).unwrap();
    assert!((d - p).norm() > 0.4);
    assert!((poses[&1].transform_point(&d).z - 12.5).abs() < 1e-9);
    assert!(initial_position(&obs[..1], &poses, &intr()).is_none());
}

#[test]
fn config_validation() {
    assert!(WindowConfig::default().validate().is_ok());
    let bad = WindowConfig {
        window_min: 12,
        ..WindowConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = WindowConfig {
        middle_max: 20.0,
        ..WindowConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn too_small_window_is_rejected() {
    let mut s = scene(7, 10, 0.0, &CLEAN);
    let mut one = s.keyframes[..1].to_vec();
    let r = build_and_solve_window(&mut one, &mut s.landmarks, None, &intr(), &WindowConfig::default(), &exact_trim(), &LmOptions::default());
    assert!(r.is_err());
}
