//! Binary little-endian PLY export of fused point clouds.

use super::IoError;
use crate::aligner::Reconstruction;
use nalgebra::Vector3;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

/// One exported point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub position: [f32; 3],
    pub color: [u8; 3],
}

/// Hue wheel color of frame `i` out of `frames`.
pub fn frame_color(i: usize, frames: usize) -> [u8; 3] {
    let h = 6.0 * i as f64 / frames.max(1) as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |c: f64| (c * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Vertices of pixels on the `stride` lattice whose disparity is at least `d_min`.
pub fn reconstruction_vertices(rec: &Reconstruction, stride: usize, d_min: f64) -> Vec<PlyVertex> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for i in 0..rec.frames() {
        let color = frame_color(i, rec.frames());
        let grid = &rec.disparity[i];
        for v in (0..grid.height()).step_by(stride) {
            for u in (0..grid.width()).step_by(stride) {
                if let Some(p) = rec.point(i, v * grid.width() + u, d_min) {
                    let p: Vector3<f32> = p.cast();
                    out.push(PlyVertex {
                        position: [p.x, p.y, p.z],
                        color,
                    });
                }
            }
        }
    }
    out
}

/// Writes `vertices` as a binary little-endian PLY file.
pub fn write_ply(vertices: &[PlyVertex], path: &Path) -> Result<(), IoError> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        vertices.len()
    );
    let mut bytes = header.into_bytes();
    bytes.reserve(vertices.len() * 15);
    for v in vertices {
        v.position.iter().for_each(|c| bytes.extend_from_slice(&c.to_le_bytes()));
        bytes.extend_from_slice(&v.color);
    }
    fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Exports the fused point cloud of `rec`; returns the vertex count.
pub fn export_ply(rec: &Reconstruction, path: &Path, stride: usize, d_min: f64) -> Result<usize, IoError> {
    let vertices = reconstruction_vertices(rec, stride, d_min);
    write_ply(&vertices, path)?;
    Ok(vertices.len())
}

/// Reads a file written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<Vec<PlyVertex>, IoError> {
    let io = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bad = |msg: &str| IoError::Invalid(format!("{}: {msg}", path.display()));
    let mut reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut count = None;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(io)? == 0 {
            return Err(bad("header ended early"));
        }
        let t = line.trim();
        if t == "end_header" {
            break;
        }
        if t.starts_with("format") && t != "format binary_little_endian 1.0" {
            return Err(bad("unsupported PLY format"));
        }
        if let Some(n) = t.strip_prefix("element vertex ") {
            count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(io)?;
    if body.len() != count * 15 {
        return Err(IoError::LengthMismatch {
            path: path.to_path_buf(),
            expected: count * 15,
            got: body.len(),
        });
    }
    Ok(body
        .chunks_exact(15)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes([c[k], c[k + 1], c[k + 2], c[k + 3]]);
            PlyVertex {
                position: [f(0), f(4), f(8)],
                color: [c[12], c[13], c[14]],
            }
        })
        .collect())
}
