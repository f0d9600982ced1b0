use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::Pose;

pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
const STEP: usize = 10;
const FRAME_PERIOD: f64 = 0.1;
const SPEED_BUCKET: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("trajectory lengths differ: estimate {estimated}, truth {truth}")]
    LengthMismatch { estimated: usize, truth: usize },
    #[error("trajectory of {length:.1} m is shorter than the smallest segment ({min} m)")]
    TooShort { length: f64, min: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentError {
    pub first_frame: usize,
    pub length: f64,
    pub t_err_pct: f64,
    pub r_err_deg_per_m: f64,
    /// Segment length over its duration at 10 Hz, m/s.
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub t_err_pct: f64,
    pub r_err_deg_per_m: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub segments: Vec<SegmentError>,
    /// `(segment length, averages)` for every length with at least one segment.
    pub per_length: Vec<(f64, ErrorSummary)>,
    /// `(lower speed bound, averages)` over 2 m/s buckets.
    pub per_speed: Vec<(f64, ErrorSummary)>,
    pub overall: ErrorSummary,
}

fn summarize<'a>(it: impl Iterator<Item = &'a SegmentError>) -> ErrorSummary {
    let (mut t, mut r, mut n) = (0.0, 0.0, 0usize);
    for s in it {
        t += s.t_err_pct;
        r += s.r_err_deg_per_m;
        n += 1;
    }
    let d = n.max(1) as f64;
    ErrorSummary {
        t_err_pct: t / d,
        r_err_deg_per_m: r / d,
        count: n,
    }
}

/// Cumulative path length along camera centres.
pub fn path_distances(poses: &[Pose]) -> Vec<f64> {
    let mut d = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += (p.center() - poses[i - 1].center()).norm();
        }
        d.push(acc);
    }
    d
}

/// KITTI odometry error between camera-from-world trajectories.
///
/// Segments start every 10 frames and end at the first frame whose path
/// distance exceeds the start distance by the segment length, as in the
/// benchmark's reference evaluation.
pub fn kitti_metric(estimated: &[Pose], truth: &[Pose]) -> Result<ErrorReport, MetricError> {
    if estimated.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            estimated: estimated.len(),
            truth: truth.len(),
        });
    }
    let dist = path_distances(truth);
    let total = dist.last().copied().unwrap_or(0.0);
    let to_world = |p: &[Pose]| p.iter().map(Pose::inverse).collect::<Vec<_>>();
    let (est, gt) = (to_world(estimated), to_world(truth));
    let mut segments = Vec::new();
    for first in (0..gt.len()).step_by(STEP) {
        for &len in &SEGMENT_LENGTHS {
            let target = dist[first] + len;
            let last = first + dist[first..].partition_point(|&d| d <= target);
            if last >= gt.len() {
                continue;
            }
            let delta_gt = gt[first].inverse() * gt[last];
            let delta_est = est[first].inverse() * est[last];
            let err = delta_est.inverse() * delta_gt;
            segments.push(SegmentError {
                first_frame: first,
                length: len,
                t_err_pct: 100.0 * err.translation.norm() / len,
                r_err_deg_per_m: err.rotation_angle().to_degrees() / len,
                speed: len / (FRAME_PERIOD * (last - first + 1) as f64),
            });
        }
    }
    if segments.is_empty() {
        return Err(MetricError::TooShort {
            length: total,
            min: SEGMENT_LENGTHS[0],
        });
    }
    let per_length = SEGMENT_LENGTHS
        .iter()
        .map(|&l| (l, summarize(segments.iter().filter(|s| s.length == l))))
        .filter(|(_, s)| s.count > 0)
        .collect();
    let max_bucket = segments.iter().map(|s| (s.speed / SPEED_BUCKET) as usize).max().unwrap_or(0);
    let per_speed = (0..=max_bucket)
        .map(|b| {
            (
                b as f64 * SPEED_BUCKET,
                summarize(segments.iter().filter(|s| (s.speed / SPEED_BUCKET) as usize == b)),
            )
        })
        .filter(|(_, s)| s.count > 0)
        .collect();
    let overall = summarize(segments.iter());
    Ok(ErrorReport {
        segments,
        per_length,
        per_speed,
        overall,
    })
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "translation {:.4} %  rotation {:.6} deg/m  ({} segments)",
            self.overall.t_err_pct, self.overall.r_err_deg_per_m, self.overall.count
        )?;
        for (l, s) in &self.per_length {
            writeln!(f, "  {:>4} m  {:.4} %  {:.6} deg/m  n={}", l, s.t_err_pct, s.r_err_deg_per_m, s.count)?;
        }
        for (v, s) in &self.per_speed {
            writeln!(
                f,
                "  {:>4.0}-{:<4.0} m/s  {:.4} %  {:.6} deg/m  n={}",
                v,
                v + SPEED_BUCKET,
                s.t_err_pct,
                s.r_err_deg_per_m,
                s.count
            )?;
        }
        Ok(())
    }
}

/// CSV with one row per segment length and a final `all` row.
pub fn write_report_to<W: Write>(mut w: W, report: &ErrorReport) -> std::io::Result<()> {
    writeln!(w, "segment_length,t_err_pct,r_err_deg_per_m")?;
    for (l, s) in &report.per_length {
        writeln!(w, "{},{},{}", l, s.t_err_pct, s.r_err_deg_per_m)?;
    }
    writeln!(w, "all,{},{}", report.overall.t_err_pct, report.overall.r_err_deg_per_m)?;
    w.flush()
}

pub fn write_report(path: &Path, report: &ErrorReport) -> std::io::Result<()> {
    write_report_to(std::io::BufWriter::new(std::fs::File::create(path)?), report)
}
