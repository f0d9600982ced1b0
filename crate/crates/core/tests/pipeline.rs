use std::fs;

use lidarmono::backend::FrameClass;
use lidarmono::geometry::Pose;
use lidarmono::pipeline::{
    generate_scene, load_kitti_sequence, path_distances, run_pipeline, write_sequence, DatasetError, Mode,
    PathSegment, PipelineConfig, SceneSpec,
};

fn deterministic() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.trim.time_bound_ms = None;
    cfg
}

fn end_error(est: &[Pose], truth: &[Pose]) -> f64 {
    (est.last().unwrap().center() - truth.last().unwrap().center()).norm()
}

#[test]
fn noiseless_straight_run() {
    let spec = SceneSpec::corridor(100.0);
    let scene = generate_scene(&spec, spec.duration_frames(), 11).unwrap();
    let gt = scene.sequence.ground_truth.clone().unwrap();
    assert!((path_distances(&gt).last().unwrap() - 100.0).abs() < 1e-9);
    let cfg = deterministic();
    let full = run_pipeline(&scene.sequence, &cfg, Mode::Full).unwrap();
    let prior = run_pipeline(&scene.sequence, &cfg, Mode::PriorOnly).unwrap();
    assert_eq!(full.poses.len(), gt.len());
    assert_eq!(full.poses[0], Pose::identity());
    let (ef, ep) = (end_error(&full.poses, &gt), end_error(&prior.poses, &gt));
    assert!(ef < 1e-3, "{ef}");
    assert!(ef <= ep, "{ef} vs {ep}");
    // 100 m leaves no complete 100 m segment to score.
    assert!(full.report.is_none());
    assert!(!full.keyframes().is_empty());
    assert!(prior.keyframes().is_empty());
}

#[test]
fn runs_are_deterministic() {
    let spec = SceneSpec {
        pixel_noise: 0.5,
        ..SceneSpec::corridor(30.0)
    };
    let scene = generate_scene(&spec, spec.duration_frames(), 4).unwrap();
    let cfg = deterministic();
    let a = run_pipeline(&scene.sequence, &cfg, Mode::Full).unwrap();
    let b = run_pipeline(&scene.sequence, &cfg, Mode::Full).unwrap();
    assert_eq!(a.poses, b.poses);
    assert_eq!(a.frames, b.frames);
}

#[test]
fn standstill_gives_identity() {
    let spec = SceneSpec {
        path: vec![PathSegment::Stop { duration: 1.0 }],
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec, spec.duration_frames(), 0).unwrap();
    let out = run_pipeline(&scene.sequence, &deterministic(), Mode::Full).unwrap();
    for (k, (pose, rec)) in out.poses.iter().zip(&out.frames).enumerate() {
        assert!(pose.translation.norm() < 1e-9 && pose.rotation.angle() < 1e-9, "frame {k}: {pose:?}");
        if k > 0 {
            assert_eq!(rec.class, Some(FrameClass::Rejected), "frame {k}");
        }
    }
    assert_eq!(out.keyframes(), vec![0]);
}

#[test]
fn written_sequence_loads_back() {
    let spec = SceneSpec::corridor(15.0);
    let scene = generate_scene(&spec, 6, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(&scene.sequence, dir.path()).unwrap();
    let loaded = load_kitti_sequence(dir.path()).unwrap();
    assert_eq!(loaded.len(), 6);
    assert_eq!(loaded.intrinsics, scene.sequence.intrinsics);
    assert_eq!(loaded.timestamps, scene.sequence.timestamps);
    assert_eq!(loaded.tracks, scene.sequence.tracks);
    let gt = scene.sequence.ground_truth.as_ref().unwrap();
    for (a, b) in loaded.ground_truth.as_ref().unwrap().iter().zip(gt) {
        assert!((a.translation - b.translation).norm() < 1e-12);
    }
    let c0 = loaded.source.cloud(2).unwrap();
    let c1 = scene.sequence.source.cloud(2).unwrap();
    assert_eq!(c0.len(), c1.len());
    assert!(c0.iter().zip(&c1).all(|(a, b)| (a - b).norm() < 1e-4));
    assert_eq!(loaded.source.semantics(3).unwrap(), scene.sequence.source.semantics(3).unwrap());
    let out = run_pipeline(&loaded, &deterministic(), Mode::Full).unwrap();
    assert_eq!(out.poses.len(), 6);
}

#[test]
fn loader_reports_missing_and_malformed_files() {
    let scene = generate_scene(&SceneSpec::corridor(10.0), 3, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(&scene.sequence, dir.path()).unwrap();
    assert_eq!(load_kitti_sequence(dir.path()).unwrap().len(), 3);

    let calib = dir.path().join("calib.txt");
    let good = fs::read_to_string(&calib).unwrap();
    let first = good.lines().next().unwrap();
    let short: Vec<&str> = first.split_whitespace().take(12).collect();
    fs::write(&calib, good.replacen(first, &short.join(" "), 1)).unwrap();
    match load_kitti_sequence(dir.path()) {
        Err(DatasetError::MalformedCalibration { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected malformed calibration, got {other:?}"),
    }
    fs::write(&calib, good).unwrap();

    fs::remove_dir_all(dir.path().join("velodyne")).unwrap();
    match load_kitti_sequence(dir.path()) {
        Err(DatasetError::MissingFile(p)) => assert!(p.ends_with("velodyne")),
        other => panic!("expected missing velodyne, got {other:?}"),
    }
}
