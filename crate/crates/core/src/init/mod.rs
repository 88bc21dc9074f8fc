//! Warm start for the alignment: chain the clips into one frame with
//! Umeyama over their shared frames, estimate focal lengths from each clip's
//! reference frame, then recover every camera with RANSAC PnP against the
//! fused point maps.

mod intrinsics;
mod pnp;
mod umeyama;

pub use intrinsics::init_intrinsics;
pub use pnp::{
    camera_from_projection, dlt_projection, ransac_pnp, refine_pose, PnpOptions, PnpResult,
};
pub use umeyama::{alignment_cost, umeyama};

use crate::geometry::{DisparityMap, Grid, Intrinsics, PointMap, Pose, Similarity};
use crate::windowing::{WindowGroup, WindowIndex};
use log::debug;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondence(String),
    #[error("group {group} (start {start}) shares no valid pixels with earlier groups")]
    DisconnectedGroups { group: usize, start: usize },
    #[error("every point lies behind the camera")]
    BehindCamera,
    #[error("insufficient correspondences: got {got}, need {need}")]
    InsufficientPoints { got: usize, need: usize },
    #[error("PnP failed: inlier ratio {inlier_ratio:.3} below 0.1")]
    PnpFailure { inlier_ratio: f64 },
    #[error("groups do not match the window index: {0}")]
    GroupMismatch(String),
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<InitError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub pnp: PnpOptions,
    /// Upper bound on correspondences per overlap when chaining groups.
    pub max_overlap_points: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            pnp: PnpOptions::default(),
            max_overlap_points: 4096,
        }
    }
}

/// Starting point of the optimization.
///
/// The world frame is the camera frame of frame 0 (identity pose) at the
/// scale of group 0's point maps.
#[derive(Debug, Clone, PartialEq)]
pub struct InitState {
    /// Per group: maps clip-relative point maps into the world frame.
    pub point_similarities: Vec<Similarity>,
    pub poses: Vec<Pose>,
    pub focals: Vec<f64>,
    pub disparity: Vec<DisparityMap>,
    pub pnp_inlier_ratios: Vec<f64>,
}

pub(crate) fn check_groups(groups: &[WindowGroup], index: &WindowIndex) -> Result<(), InitError> {
    if groups.len() != index.starts.len() {
        return Err(InitError::GroupMismatch(format!(
            "{} groups for {} window starts",
            groups.len(),
            index.starts.len()
        )));
    }
    let shape = groups.first().map(|g| g.shape()).unwrap_or((0, 0));
    for (g, (group, &start)) in groups.iter().zip(&index.starts).enumerate() {
        if group.start != start || group.len() != index.window {
            return Err(InitError::GroupMismatch(format!(
                "group {g} covers [{}, {}) but the index expects [{start}, {})",
                group.start,
                group.start + group.len(),
                start + index.window
            )));
        }
        if group.disparity.len() != group.len() || group.uncertainty.len() != group.len() {
            return Err(InitError::GroupMismatch(format!(
                "group {g} has inconsistent map counts"
            )));
        }
        if group.shape() != shape {
            return Err(InitError::GroupMismatch(format!(
                "group {g} has maps of size {:?}, expected {shape:?}",
                group.shape()
            )));
        }
    }
    Ok(())
}

/// Running per-pixel weighted sum of aligned point maps.
struct Accumulator {
    sum: Vec<Vec<Vector3<f64>>>,
    weight: Vec<Vec<f64>>,
}

impl Accumulator {
    fn new(frames: usize, pixels: usize) -> Self {
        Self {
            sum: vec![vec![Vector3::zeros(); pixels]; frames],
            weight: vec![vec![0.0; pixels]; frames],
        }
    }

    fn add(&mut self, group: &WindowGroup, sim: &Similarity) {
        for local in 0..group.len() {
            let frame = group.start + local;
            for idx in 0..group.points[local].len() {
                if group.is_valid(local, idx) {
                    let w = 1.0 / group.sigma(local, idx);
                    self.sum[frame][idx] += sim.apply(&group.points[local].as_slice()[idx]) * w;
                    self.weight[frame][idx] += w;
                }
            }
        }
    }

    fn mean(&self, frame: usize, idx: usize) -> Option<Vector3<f64>> {
        let w = self.weight[frame][idx];
        (w > 0.0).then(|| self.sum[frame][idx] / w)
    }
}

/// Similarities taking each group's point maps into group 0's frame.
///
/// Groups are visited in start order; each is fitted with Umeyama against
/// the running average of the already-aligned groups over their shared
/// frames.
pub fn chain_groups(
    groups: &[WindowGroup],
    index: &WindowIndex,
    max_points: usize,
) -> Result<Vec<Similarity>, InitError> {
    check_groups(groups, index)?;
    let Some(first) = groups.first() else {
        return Ok(Vec::new());
    };
    let pixels = first.points[0].len();
    let mut acc = Accumulator::new(index.frames, pixels);
    let mut sims = Vec::with_capacity(groups.len());
    sims.push(Similarity::identity());
    acc.add(first, &sims[0]);

    for (g, group) in groups.iter().enumerate().skip(1) {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for local in 0..group.len() {
            let frame = group.start + local;
            for idx in 0..pixels {
                if !group.is_valid(local, idx) {
                    continue;
                }
                if let Some(target) = acc.mean(frame, idx) {
                    src.push(group.points[local].as_slice()[idx]);
                    dst.push(target);
                }
            }
        }
        if src.is_empty() {
            return Err(InitError::DisconnectedGroups {
                group: g,
                start: group.start,
            });
        }
        if src.len() > max_points {
            let step = src.len().div_ceil(max_points);
            src = src.into_iter().step_by(step).collect();
            dst = dst.into_iter().step_by(step).collect();
        }
        let sim = umeyama(&src, &dst, true)?;
        debug!(
            "chained group {g} (start {}) on {} correspondences: scale {:.4}",
            group.start,
            src.len(),
            sim.scale
        );
        acc.add(group, &sim);
        sims.push(sim);
    }
    Ok(sims)
}

/// Per-frame weighted average of all groups' aligned point maps, with a
/// validity mask.
pub fn fuse_point_maps(
    groups: &[WindowGroup],
    sims: &[Similarity],
    frames: usize,
) -> Vec<(PointMap, Grid<bool>)> {
    let (height, width) = groups.first().map(|g| g.shape()).unwrap_or((0, 0));
    let mut acc = Accumulator::new(frames, height * width);
    for (group, sim) in groups.iter().zip(sims) {
        acc.add(group, sim);
    }
    (0..frames)
        .map(|f| {
            let mut pts = Vec::with_capacity(height * width);
            let mut mask = Vec::with_capacity(height * width);
            for idx in 0..height * width {
                match acc.mean(f, idx) {
                    Some(x) => {
                        pts.push(x);
                        mask.push(true);
                    }
                    None => {
                        pts.push(Vector3::zeros());
                        mask.push(false);
                    }
                }
            }
            (
                Grid::from_vec(height, width, pts),
                Grid::from_vec(height, width, mask),
            )
        })
        .collect()
}

/// Focal length of a clip's reference frame.
///
/// The clip's point map may carry an arbitrary similarity, so it is first
/// brought into its own camera frame with a linear projective fit, then the
/// focal is estimated by [`init_intrinsics`].
pub fn reference_focal(group: &WindowGroup) -> Result<f64, InitError> {
    let points = &group.points[0];
    let mut pts = Vec::new();
    let mut rays = Vec::new();
    for idx in 0..points.len() {
        if group.is_valid(0, idx) {
            let (v, u) = points.coords(idx);
            pts.push(points.as_slice()[idx]);
            rays.push(Vector3::new(u as f64, v as f64, 1.0));
        }
    }
    let p = dlt_projection(&pts, &rays)?;
    let (_, pose) = camera_from_projection(&p)?;
    let in_camera = Grid::from_fn(points.height(), points.width(), |v, u| {
        let idx = v * points.width() + u;
        if group.is_valid(0, idx) {
            pose.world_to_camera(&points.as_slice()[idx])
        } else {
            Vector3::repeat(f64::NAN)
        }
    });
    init_intrinsics(&in_camera)
}

/// Builds the complete warm start.
pub fn initialize(
    groups: &[WindowGroup],
    index: &WindowIndex,
    config: &InitConfig,
) -> Result<InitState, InitError> {
    let mut sims = chain_groups(groups, index, config.max_overlap_points)?;
    let fused = fuse_point_maps(groups, &sims, index.frames);
    let (height, width) = groups[0].shape();

    let ref_focals = groups
        .iter()
        .map(reference_focal)
        .collect::<Result<Vec<_>, _>>()?;
    // Each frame takes the focal of the earliest clip containing it.
    let focals: Vec<f64> = (0..index.frames)
        .map(|f| {
            let g = groups
                .iter()
                .position(|g| g.contains(f))
                .expect("every frame is covered");
            ref_focals[g]
        })
        .collect();

    let mut poses = Vec::with_capacity(index.frames);
    let mut ratios = Vec::with_capacity(index.frames);
    for (frame, (points, mask)) in fused.iter().enumerate() {
        let k = Intrinsics::centered(focals[frame], width, height);
        let options = PnpOptions {
            seed: config.pnp.seed.wrapping_add(frame as u64),
            ..config.pnp
        };
        let res = ransac_pnp(points, mask, &k, &options).map_err(|e| InitError::Frame {
            frame,
            source: Box::new(e),
        })?;
        poses.push(res.pose);
        ratios.push(res.inlier_ratio);
    }

    // Move the world into frame 0's camera frame.
    let gauge = Similarity::world_to_camera(&poses[0]);
    for sim in &mut sims {
        *sim = gauge.compose(sim);
    }
    for pose in &mut poses {
        *pose = gauge.transform_pose(pose);
    }
    poses[0] = Pose::identity();

    let disparity = (0..index.frames)
        .map(|frame| init_disparity(groups, &sims, frame, &poses[frame], height, width))
        .collect();

    Ok(InitState {
        point_similarities: sims,
        poses,
        focals,
        disparity,
        pnp_inlier_ratios: ratios,
    })
}

/// Depth of the aligned point maps in the camera of `frame`, averaged over
/// groups with 1/σ weights and inverted.
fn init_disparity(
    groups: &[WindowGroup],
    sims: &[Similarity],
    frame: usize,
    pose: &Pose,
    height: usize,
    width: usize,
) -> DisparityMap {
    let n = height * width;
    let mut depth_sum = vec![0.0; n];
    let mut weight = vec![0.0; n];
    for (group, sim) in groups.iter().zip(sims) {
        let Some(local) = group.local(frame) else {
            continue;
        };
        for idx in 0..n {
            if !group.is_valid(local, idx) {
                continue;
            }
            let z = pose
                .world_to_camera(&sim.apply(&group.points[local].as_slice()[idx]))
                .z;
            if z > 0.0 {
                let w = 1.0 / group.sigma(local, idx);
                depth_sum[idx] += w * z;
                weight[idx] += w;
            }
        }
    }
    let mut known: Vec<f64> = depth_sum
        .iter()
        .zip(&weight)
        .filter(|(_, w)| **w > 0.0)
        .map(|(d, w)| w / d)
        .collect();
    let fill = if known.is_empty() {
        1.0
    } else {
        let mid = known.len() / 2;
        *known.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
    };
    let data = depth_sum
        .iter()
        .zip(&weight)
        .map(|(d, w)| if *w > 0.0 { w / d } else { fill })
        .collect();
    Grid::from_vec(height, width, data)
}
