//! TUM trajectory text: `timestamp tx ty tz qx qy qz qw` per frame.

use super::IoError;
use crate::geometry::{matrix_from_quaternion, quaternion_from_matrix, Pose};
use nalgebra::Vector3;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

fn num(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else {
        x.to_string()
    }
}

/// One line per pose; the timestamp is the frame index and the quaternion is
/// the camera-to-world rotation with `qw >= 0`.
pub fn format_trajectory(poses: &[Pose]) -> String {
    let mut out = String::new();
    for (i, pose) in poses.iter().enumerate() {
        let [w, x, y, z] = quaternion_from_matrix(&pose.rotation.transpose());
        let c = pose.center;
        let fields = [c.x, c.y, c.z, x, y, z, w].map(num).join(" ");
        writeln!(out, "{:?} {fields}", i as f64).expect("writing to a String");
    }
    out
}

pub fn export_trajectory(poses: &[Pose], path: &Path) -> Result<(), IoError> {
    fs::write(path, format_trajectory(poses)).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses trajectory text; blank lines and `#` comments are skipped.
pub fn parse_trajectory(text: &str) -> Result<Vec<(f64, Pose)>, IoError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::Invalid(format!("line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(IoError::Invalid(format!("line {}: expected 8 fields, found {}", n + 1, v.len())));
        }
        let cam_to_world = matrix_from_quaternion(&[v[7], v[4], v[5], v[6]]);
        out.push((v[0], Pose::new(cam_to_world.transpose(), Vector3::new(v[1], v[2], v[3]))));
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trajectory(&text).map_err(|e| IoError::Invalid(format!("{}: {e}", path.display())))
}
