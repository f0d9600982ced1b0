use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Matrix3x4;

use crate::geometry::Pose;

use super::DatasetError;

fn clean(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// One KITTI pose line for a camera-from-world pose: the row-major 3 × 4
/// camera-to-world matrix.
pub fn format_pose(pose: &Pose) -> String {
    let m = pose.inverse().to_matrix3x4();
    let mut fields = Vec::with_capacity(12);
    for r in 0..3 {
        for c in 0..4 {
            fields.push(format!("{}", clean(m[(r, c)])));
        }
    }
    fields.join(" ")
}

pub fn write_trajectory_to<W: Write>(mut w: W, poses: &[Pose]) -> std::io::Result<()> {
    for p in poses {
        writeln!(w, "{}", format_pose(p))?;
    }
    w.flush()
}

pub fn write_trajectory(path: &Path, poses: &[Pose]) -> Result<(), DatasetError> {
    write_trajectory_to(BufWriter::new(File::create(path)?), poses)?;
    Ok(())
}

/// Parses KITTI pose lines into camera-from-world poses.
pub fn parse_trajectory<R: BufRead>(reader: R, origin: &str) -> Result<Vec<Pose>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let malformed = |message: String| DatasetError::Malformed {
            location: format!("{origin}:{}", i + 1),
            message,
        };
        let vals = text
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| malformed(e.to_string()))?;
        if vals.len() != 12 {
            return Err(malformed(format!("expected 12 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(malformed("non-finite value".into()));
        }
        let m = Matrix3x4::from_row_slice(&vals);
        out.push(Pose::from_matrix3x4(&m).inverse());
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Pose>, DatasetError> {
    let file = File::open(path).map_err(|_| DatasetError::MissingFile(path.to_path_buf()))?;
    parse_trajectory(BufReader::new(file), &path.display().to_string())
}
