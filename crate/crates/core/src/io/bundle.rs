//! Scene bundles: a JSON manifest plus raw little-endian `f32` blobs.
//!
//! Blobs are row-major with index order (row, column, channel). Point maps
//! have 3 channels, disparity and uncertainty maps 1, ray maps 6
//! (`dx dy dz mx my mz`).

use super::IoError;
use crate::geometry::{Grid, Intrinsics, Pose, RayMap, Similarity};
use crate::oracle::{GroupTruth, PerturbSpec, Scene, SceneSpec};
use crate::windowing::WindowGroup;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Where the data came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Oracle {
        scene: SceneSpec,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        perturb: Option<PerturbSpec>,
    },
    Aligned {
        #[serde(default)]
        parameters: BTreeMap<String, serde_json::Value>,
    },
    External,
}

/// Camera of one frame, stored in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation, rows first.
    pub rotation: [[f64; 3]; 3],
    pub center: [f64; 3],
}

impl CameraRecord {
    pub fn new(intrinsics: Intrinsics, pose: &Pose) -> Self {
        let r = &pose.rotation;
        Self {
            intrinsics,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            center: pose.center.into(),
        }
    }

    pub fn pose(&self) -> Pose {
        let r = self.rotation;
        Pose::new(
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::from(self.center),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Similarity> for SimilarityRecord {
    fn from(s: &Similarity) -> Self {
        let c = CameraRecord::new(Intrinsics::new(1.0, 1.0, 0.0, 0.0), &Pose::new(s.rotation, s.translation));
        Self {
            scale: s.scale,
            rotation: c.rotation,
            translation: c.center,
        }
    }
}

impl From<&SimilarityRecord> for Similarity {
    fn from(r: &SimilarityRecord) -> Self {
        let pose = CameraRecord {
            intrinsics: Intrinsics::new(1.0, 1.0, 0.0, 0.0),
            rotation: r.rotation,
            center: r.translation,
        }
        .pose();
        Similarity::new(r.scale, pose.rotation, pose.center)
    }
}

/// Injected per-group ambiguity, kept for round-trip tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupTruthRecord {
    pub point_similarity: SimilarityRecord,
    pub disparity_affine: (f64, f64),
    pub ray_similarity: SimilarityRecord,
}

impl From<&GroupTruth> for GroupTruthRecord {
    fn from(t: &GroupTruth) -> Self {
        Self {
            point_similarity: (&t.point_similarity).into(),
            disparity_affine: t.disparity_affine,
            ray_similarity: (&t.ray_similarity).into(),
        }
    }
}

impl GroupTruthRecord {
    pub fn to_truth(&self, start: usize) -> GroupTruth {
        GroupTruth {
            start,
            point_similarity: (&self.point_similarity).into(),
            disparity_affine: self.disparity_affine,
            ray_similarity: (&self.ray_similarity).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupEntry {
    start: usize,
    points: Vec<String>,
    disparity: Vec<String>,
    uncertainty: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rays: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    truth: Option<GroupTruthRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    dtype: String,
    endianness: String,
    layout: String,
    frames: usize,
    height: usize,
    width: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    stride: Option<usize>,
    #[serde(default)]
    starts: Vec<usize>,
    provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cameras: Option<Vec<CameraRecord>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    disparity: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    points: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rays: Option<Vec<String>>,
    #[serde(default)]
    groups: Vec<GroupEntry>,
}

/// In-memory contents of a bundle directory.
///
/// Scene bundles carry per-frame cameras and maps; prediction bundles carry
/// window groups; result bundles carry cameras and disparity. Map values
/// pass through `f32` on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub provenance: Provenance,
    pub cameras: Option<Vec<CameraRecord>>,
    pub disparity: Option<Vec<Grid<f64>>>,
    pub points: Option<Vec<Grid<Vector3<f64>>>>,
    pub rays: Option<Vec<RayMap>>,
    pub groups: Vec<WindowGroup>,
    pub group_truth: Option<Vec<GroupTruthRecord>>,
}

impl Bundle {
    pub fn empty(frames: usize, height: usize, width: usize, provenance: Provenance) -> Self {
        Self {
            frames,
            height,
            width,
            window: None,
            stride: None,
            provenance,
            cameras: None,
            disparity: None,
            points: None,
            rays: None,
            groups: Vec::new(),
            group_truth: None,
        }
    }

    /// Ground-truth bundle of an oracle scene.
    pub fn from_scene(scene: &Scene) -> Self {
        let (h, w) = scene.disparity[0].shape();
        let mut b = Self::empty(
            scene.frames(),
            h,
            w,
            Provenance::Oracle {
                scene: scene.spec.clone(),
                perturb: None,
            },
        );
        b.cameras = Some(
            scene
                .intrinsics
                .iter()
                .zip(&scene.poses)
                .map(|(k, p)| CameraRecord::new(*k, p))
                .collect(),
        );
        b.disparity = Some(scene.disparity.clone());
        b.points = Some(scene.points.clone());
        b.rays = Some(scene.rays.clone());
        b
    }

    pub fn poses(&self) -> Option<Vec<Pose>> {
        self.cameras.as_ref().map(|c| c.iter().map(CameraRecord::pose).collect())
    }

    pub fn starts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.start).collect()
    }

    /// Every map value rounded through `f32`, as a read would return it.
    pub fn quantized(&self) -> Self {
        let q = |x: f64| x as f32 as f64;
        let qv = |v: &Vector3<f64>| v.map(q);
        let mut b = self.clone();
        if let Some(d) = b.disparity.as_mut() {
            d.iter_mut().for_each(|m| *m = m.map(|x| q(*x)));
        }
        if let Some(p) = b.points.as_mut() {
            p.iter_mut().for_each(|m| *m = m.map(qv));
        }
        let qr = |r: &RayMap| RayMap::new(r.directions.map(qv), r.moments.map(qv));
        if let Some(r) = b.rays.as_mut() {
            r.iter_mut().for_each(|m| *m = qr(m));
        }
        for g in &mut b.groups {
            g.points.iter_mut().for_each(|m| *m = m.map(qv));
            g.disparity.iter_mut().for_each(|m| *m = m.map(|x| q(*x)));
            g.uncertainty.iter_mut().for_each(|m| *m = m.map(|x| q(*x)));
            if let Some(r) = g.rays.as_mut() {
                r.iter_mut().for_each(|m| *m = qr(m));
            }
        }
        b
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_blob(dir: &Path, name: &str, values: impl Iterator<Item = f64>) -> Result<String, IoError> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(name.to_string())
}

fn read_blob(dir: &Path, name: &str, expected: usize) -> Result<Vec<f64>, IoError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(IoError::MissingBlob { path });
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() != expected * 4 {
        return Err(IoError::LengthMismatch {
            path,
            expected: expected * 4,
            got: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn scalars(grid: &Grid<f64>) -> impl Iterator<Item = f64> + '_ {
    grid.as_slice().iter().copied()
}

fn vectors(grid: &Grid<Vector3<f64>>) -> impl Iterator<Item = f64> + '_ {
    grid.as_slice().iter().flat_map(|v| [v.x, v.y, v.z])
}

fn rays_iter(r: &RayMap) -> impl Iterator<Item = f64> + '_ {
    r.directions
        .as_slice()
        .iter()
        .zip(r.moments.as_slice())
        .flat_map(|(d, m)| [d.x, d.y, d.z, m.x, m.y, m.z])
}

struct Reader<'a> {
    dir: &'a Path,
    height: usize,
    width: usize,
}

impl Reader<'_> {
    fn scalar(&self, name: &str) -> Result<Grid<f64>, IoError> {
        let v = read_blob(self.dir, name, self.height * self.width)?;
        Ok(Grid::from_vec(self.height, self.width, v))
    }

    fn vector(&self, name: &str) -> Result<Grid<Vector3<f64>>, IoError> {
        let v = read_blob(self.dir, name, self.height * self.width * 3)?;
        let data = v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        Ok(Grid::from_vec(self.height, self.width, data))
    }

    fn rays(&self, name: &str) -> Result<RayMap, IoError> {
        let v = read_blob(self.dir, name, self.height * self.width * 6)?;
        let d = v.chunks_exact(6).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        let m = v.chunks_exact(6).map(|c| Vector3::new(c[3], c[4], c[5])).collect();
        Ok(RayMap::new(
            Grid::from_vec(self.height, self.width, d),
            Grid::from_vec(self.height, self.width, m),
        ))
    }

    fn all<T>(&self, names: &[String], f: impl Fn(&Self, &str) -> Result<T, IoError>) -> Result<Vec<T>, IoError> {
        names.iter().map(|n| f(self, n)).collect()
    }
}

fn check_shape(what: &str, shape: (usize, usize), h: usize, w: usize) -> Result<(), IoError> {
    if shape != (h, w) {
        return Err(IoError::Invalid(format!("{what} has shape {shape:?}, bundle is {h}x{w}")));
    }
    Ok(())
}

/// Writes `bundle` into directory `dir`, creating it if needed.
pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (h, w) = (bundle.height, bundle.width);
    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        dtype: "f32".into(),
        endianness: "little".into(),
        layout: "row_major_hwc".into(),
        frames: bundle.frames,
        height: h,
        width: w,
        window: bundle.window,
        stride: bundle.stride,
        starts: bundle.starts(),
        provenance: bundle.provenance.clone(),
        cameras: bundle.cameras.clone(),
        disparity: None,
        points: None,
        rays: None,
        groups: Vec::new(),
    };
    if let Some(maps) = &bundle.disparity {
        let mut names = Vec::new();
        for (i, m) in maps.iter().enumerate() {
            check_shape("disparity", m.shape(), h, w)?;
            names.push(write_blob(dir, &format!("frames/disparity_{i:04}.f32"), scalars(m))?);
        }
        manifest.disparity = Some(names);
    }
    if let Some(maps) = &bundle.points {
        let mut names = Vec::new();
        for (i, m) in maps.iter().enumerate() {
            check_shape("points", m.shape(), h, w)?;
            names.push(write_blob(dir, &format!("frames/points_{i:04}.f32"), vectors(m))?);
        }
        manifest.points = Some(names);
    }
    if let Some(maps) = &bundle.rays {
        let mut names = Vec::new();
        for (i, m) in maps.iter().enumerate() {
            check_shape("rays", (m.height(), m.width()), h, w)?;
            names.push(write_blob(dir, &format!("frames/rays_{i:04}.f32"), rays_iter(m))?);
        }
        manifest.rays = Some(names);
    }
    for (gi, g) in bundle.groups.iter().enumerate() {
        let prefix = format!("groups/g{:04}", g.start);
        let mut entry = GroupEntry {
            start: g.start,
            points: Vec::new(),
            disparity: Vec::new(),
            uncertainty: Vec::new(),
            rays: g.rays.as_ref().map(|_| Vec::new()),
            truth: bundle.group_truth.as_ref().and_then(|t| t.get(gi).copied()),
        };
        for l in 0..g.len() {
            check_shape("group map", g.points[l].shape(), h, w)?;
            entry.points.push(write_blob(dir, &format!("{prefix}/points_{l:02}.f32"), vectors(&g.points[l]))?);
            entry.disparity.push(write_blob(dir, &format!("{prefix}/disparity_{l:02}.f32"), scalars(&g.disparity[l]))?);
            entry.uncertainty.push(write_blob(dir, &format!("{prefix}/uncertainty_{l:02}.f32"), scalars(&g.uncertainty[l]))?);
            if let (Some(names), Some(rays)) = (entry.rays.as_mut(), g.rays.as_ref()) {
                names.push(write_blob(dir, &format!("{prefix}/rays_{l:02}.f32"), rays_iter(&rays[l]))?);
            }
        }
        manifest.groups.push(entry);
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Reads a bundle directory written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<Bundle, IoError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.clone(),
        source,
    })?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(IoError::UnsupportedVersion {
            path,
            version: value.get("schema_version").map(|v| v.to_string()).unwrap_or_else(|| "missing".into()),
        });
    }
    let m: Manifest = serde_json::from_value(value).map_err(|source| IoError::Json {
        path: path.clone(),
        source,
    })?;
    if m.dtype != "f32" || m.endianness != "little" || m.layout != "row_major_hwc" {
        return Err(IoError::Invalid(format!(
            "{}: unsupported encoding {}/{}/{}",
            path.display(),
            m.dtype,
            m.endianness,
            m.layout
        )));
    }
    let r = Reader {
        dir,
        height: m.height,
        width: m.width,
    };
    let mut groups = Vec::with_capacity(m.groups.len());
    let mut truth = Vec::new();
    for e in &m.groups {
        groups.push(WindowGroup {
            start: e.start,
            points: r.all(&e.points, Reader::vector)?,
            disparity: r.all(&e.disparity, Reader::scalar)?,
            uncertainty: r.all(&e.uncertainty, Reader::scalar)?,
            rays: e.rays.as_ref().map(|n| r.all(n, Reader::rays)).transpose()?,
        });
        truth.extend(e.truth);
    }
    let group_truth = (!m.groups.is_empty() && truth.len() == m.groups.len()).then_some(truth);
    Ok(Bundle {
        frames: m.frames,
        height: m.height,
        width: m.width,
        window: m.window,
        stride: m.stride,
        provenance: m.provenance,
        cameras: m.cameras,
        disparity: m.disparity.as_ref().map(|n| r.all(n, Reader::scalar)).transpose()?,
        points: m.points.as_ref().map(|n| r.all(n, Reader::vector)).transpose()?,
        rays: m.rays.as_ref().map(|n| r.all(n, Reader::rays)).transpose()?,
        groups,
        group_truth,
    })
}

/// All files below `dir`, relative paths sorted, for byte comparisons.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), IoError> {
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
