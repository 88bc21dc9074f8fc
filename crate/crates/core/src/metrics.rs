//! Affine-invariant video depth metrics and trajectory errors.

use crate::geometry::{project_to_rotation, rotation_angle, DisparityMap, Grid, Pose, Similarity};
use crate::init::umeyama;
use nalgebra::{Matrix3, Vector3};
use std::collections::BTreeMap;
use std::fmt::Write;
use thiserror::Error;

/// Ground-truth disparities below this are treated as invalid.
pub const GT_DISPARITY_MIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {pred} predicted vs {gt} ground-truth entries")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("map sizes differ in frame {frame}")]
    ShapeMismatch { frame: usize },
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
    #[error("need at least {need} poses, got {got}")]
    TooFewPoses { got: usize, need: usize },
}

fn check_maps(
    pred: &[DisparityMap],
    gt: &[DisparityMap],
    mask: Option<&[Grid<bool>]>,
) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(MetricsError::LengthMismatch { pred: m.len(), gt: gt.len() });
        }
    }
    for (frame, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.shape() != g.shape() || mask.is_some_and(|m| m[frame].shape() != g.shape()) {
            return Err(MetricsError::ShapeMismatch { frame });
        }
    }
    Ok(())
}

/// Calls `f(frame, pred, gt)` for every valid pixel.
fn for_valid(
    pred: &[DisparityMap],
    gt: &[DisparityMap],
    mask: Option<&[Grid<bool>]>,
    mut f: impl FnMut(usize, f64, f64),
) {
    for (frame, (p, g)) in pred.iter().zip(gt).enumerate() {
        for (idx, (&pv, &gv)) in p.as_slice().iter().zip(g.as_slice()).enumerate() {
            let masked = mask.is_some_and(|m| !m[frame].as_slice()[idx]);
            if !masked && gv >= GT_DISPARITY_MIN && gv.is_finite() && pv.is_finite() {
                f(frame, pv, gv);
            }
        }
    }
}

/// One least-squares `(s, t)` with `s · pred + t ≈ gt` over all valid pixels
/// of all frames. Falls back to a shift-only fit when either side is
/// constant.
pub fn align_depth_global(
    pred: &[DisparityMap],
    gt: &[DisparityMap],
    mask: Option<&[Grid<bool>]>,
) -> Result<(f64, f64), MetricsError> {
    check_maps(pred, gt, mask)?;
    let (mut n, mut sp, mut sg) = (0usize, 0.0, 0.0);
    for_valid(pred, gt, mask, |_, p, g| {
        n += 1;
        sp += p;
        sg += g;
    });
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    let (mp, mg) = (sp / n as f64, sg / n as f64);
    let (mut spp, mut spg, mut sgg) = (0.0, 0.0, 0.0);
    for_valid(pred, gt, mask, |_, p, g| {
        spp += (p - mp) * (p - mp);
        spg += (p - mp) * (g - mg);
        sgg += (g - mg) * (g - mg);
    });
    let tiny = |v: f64, m: f64| v <= 1e-24 * n as f64 * m.abs().max(1e-12).powi(2);
    if tiny(spp, mp) || tiny(sgg, mg) {
        return Ok((1.0, mg - mp));
    }
    let s = spg / spp;
    Ok((s, mg - s * mp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDepthMetrics {
    pub abs_rel: f64,
    pub delta_125: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthEvalReport {
    pub abs_rel: f64,
    /// Percentage of pixels with `max(d̂/d, d/d̂) < 1.25`, pooled over all frames.
    pub delta_125: f64,
    pub pixels: usize,
    pub scale: f64,
    pub shift: f64,
    pub per_frame: Vec<FrameDepthMetrics>,
}

/// Metrics of already-aligned disparities, measured in depth space.
///
/// Aligned disparities are clamped to `GT_DISPARITY_MIN` before inversion.
pub fn depth_metrics(
    pred: &[DisparityMap],
    gt: &[DisparityMap],
    mask: Option<&[Grid<bool>]>,
) -> Result<DepthEvalReport, MetricsError> {
    check_maps(pred, gt, mask)?;
    let mut per = vec![(0.0, 0usize, 0usize); gt.len()];
    for_valid(pred, gt, mask, |frame, p, g| {
        let d_hat = 1.0 / p.max(GT_DISPARITY_MIN);
        let d = 1.0 / g;
        let e = &mut per[frame];
        e.0 += (d_hat - d).abs() / d;
        e.1 += usize::from((d_hat / d).max(d / d_hat) < 1.25);
        e.2 += 1;
    });
    let pixels: usize = per.iter().map(|e| e.2).sum();
    if pixels == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    let rel: f64 = per.iter().map(|e| e.0).sum();
    let inl: usize = per.iter().map(|e| e.1).sum();
    Ok(DepthEvalReport {
        abs_rel: rel / pixels as f64,
        delta_125: 100.0 * inl as f64 / pixels as f64,
        pixels,
        scale: 1.0,
        shift: 0.0,
        per_frame: per
            .iter()
            .map(|&(r, i, n)| FrameDepthMetrics {
                abs_rel: if n > 0 { r / n as f64 } else { 0.0 },
                delta_125: if n > 0 { 100.0 * i as f64 / n as f64 } else { 0.0 },
                pixels: n,
            })
            .collect(),
    })
}

/// Global scale-and-shift alignment followed by [`depth_metrics`].
pub fn evaluate_depth(
    pred: &[DisparityMap],
    gt: &[DisparityMap],
    mask: Option<&[Grid<bool>]>,
) -> Result<DepthEvalReport, MetricsError> {
    let (scale, shift) = align_depth_global(pred, gt, mask)?;
    let aligned: Vec<DisparityMap> = pred.iter().map(|p| p.map(|d| scale * d + shift)).collect();
    let mut report = depth_metrics(&aligned, gt, mask)?;
    report.scale = scale;
    report.shift = shift;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajEvalReport {
    pub ate: f64,
    pub rpe_t: f64,
    /// Degrees.
    pub rpe_r: f64,
    pub rpe_delta: usize,
    /// Maps predicted world coordinates onto ground truth.
    pub alignment: Similarity,
}

/// Similarity taking predicted centers onto ground truth.
///
/// Umeyama on the centers; when they are collinear, the rotation comes from
/// the camera orientations and scale/shift from a fixed-rotation
/// least-squares fit.
pub fn align_trajectory(pred: &[Pose], gt: &[Pose]) -> Similarity {
    let src: Vec<Vector3<f64>> = pred.iter().map(|p| p.center).collect();
    let dst: Vec<Vector3<f64>> = gt.iter().map(|p| p.center).collect();
    if let Ok(sim) = umeyama(&src, &dst, true) {
        return sim;
    }
    // World-to-world rotation Q with R_gt ≈ R_pred Qᵀ.
    let mut acc = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        acc += g.rotation.transpose() * p.rotation;
    }
    let q = project_to_rotation(&acc);
    let n = src.len() as f64;
    let ys: Vec<Vector3<f64>> = src.iter().map(|s| q * s).collect();
    let ybar = ys.iter().sum::<Vector3<f64>>() / n;
    let gbar = dst.iter().sum::<Vector3<f64>>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (y, g) in ys.iter().zip(&dst) {
        num += (y - ybar).dot(&(g - gbar));
        den += (y - ybar).norm_squared();
    }
    let scale = if den > 1e-24 && num / den > 0.0 { num / den } else { 1.0 };
    Similarity::new(scale, q, gbar - ybar * scale)
}

/// Camera-to-world relative motion from `a` to `b`: `(rotation, translation)`.
fn relative(a: &Pose, b: &Pose) -> (Matrix3<f64>, Vector3<f64>) {
    (a.rotation * b.rotation.transpose(), a.rotation * (b.center - a.center))
}

/// ATE after similarity alignment, and RMSE relative pose errors over
/// frame pairs `(i, i + rpe_delta)`.
pub fn traj_metrics(pred: &[Pose], gt: &[Pose], rpe_delta: usize) -> Result<TrajEvalReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if gt.len() < 3 {
        return Err(MetricsError::TooFewPoses { got: gt.len(), need: 3 });
    }
    let delta = rpe_delta.max(1);
    let sim = align_trajectory(pred, gt);
    let aligned: Vec<Pose> = pred.iter().map(|p| sim.transform_pose(p)).collect();
    let ate = (aligned
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.center - g.center).norm_squared())
        .sum::<f64>()
        / gt.len() as f64)
        .sqrt();
    let (mut st, mut sr, mut count) = (0.0, 0.0, 0usize);
    for i in 0..gt.len().saturating_sub(delta) {
        let (rp, tp) = relative(&aligned[i], &aligned[i + delta]);
        let (rg, tg) = relative(&gt[i], &gt[i + delta]);
        st += (tp - tg).norm_squared();
        sr += rotation_angle(&(rg.transpose() * rp)).to_degrees().powi(2);
        count += 1;
    }
    let rms = |s: f64| if count > 0 { (s / count as f64).sqrt() } else { 0.0 };
    Ok(TrajEvalReport {
        ate,
        rpe_t: rms(st),
        rpe_r: rms(sr),
        rpe_delta: delta,
        alignment: sim,
    })
}

impl DepthEvalReport {
    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "abs_rel={}", self.abs_rel);
        let _ = writeln!(s, "delta_125={}", self.delta_125);
        let _ = writeln!(s, "pixels={}", self.pixels);
        let _ = writeln!(s, "scale={}", self.scale);
        let _ = writeln!(s, "shift={}", self.shift);
        for (i, f) in self.per_frame.iter().enumerate() {
            let _ = writeln!(s, "frame.{i}.abs_rel={}", f.abs_rel);
            let _ = writeln!(s, "frame.{i}.delta_125={}", f.delta_125);
            let _ = writeln!(s, "frame.{i}.pixels={}", f.pixels);
        }
        s
    }
}

impl TrajEvalReport {
    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ate={}", self.ate);
        let _ = writeln!(s, "rpe_t={}", self.rpe_t);
        let _ = writeln!(s, "rpe_r_deg={}", self.rpe_r);
        let _ = writeln!(s, "rpe_delta={}", self.rpe_delta);
        let _ = writeln!(s, "align_scale={}", self.alignment.scale);
        s
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_x, rot_y, rotation_about_axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps(values: &[&[f64]]) -> Vec<DisparityMap> {
        values.iter().map(|v| Grid::from_vec(1, v.len(), v.to_vec())).collect()
    }

    fn random_maps(seed: u64, frames: usize) -> Vec<DisparityMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..frames).map(|_| Grid::from_fn(6, 8, |_, _| rng.random_range(0.2..2.0))).collect()
    }

    #[test]
    fn identical_disparities() {
        let gt = random_maps(1, 3);
        let (s, t) = align_depth_global(&gt, &gt, None).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && t.abs() < 1e-12);
        let r = evaluate_depth(&gt, &gt, None).unwrap();
        assert!(r.abs_rel < 1e-12);
        assert_eq!(r.delta_125, 100.0);
    }

    #[test]
    fn inverts_a_known_affine_map() {
        let gt = random_maps(2, 2);
        let pred: Vec<_> = gt.iter().map(|g| g.map(|d| (d - 0.3) / 2.0)).collect();
        let (s, t) = align_depth_global(&pred, &gt, None).unwrap();
        assert!((s - 2.0).abs() < 1e-10 && (t - 0.3).abs() < 1e-10);
    }

    #[test]
    fn joint_fit_differs_from_per_frame_fits() {
        let gt = maps(&[&[1.0, 2.0], &[1.0, 2.0]]);
        // Frame 0 is exact; frame 1 needs (s, t) = (2, 0).
        let pred = maps(&[&[1.0, 2.0], &[0.5, 1.0]]);
        let joint = align_depth_global(&pred, &gt, None).unwrap();
        let f0 = align_depth_global(&pred[..1], &gt[..1], None).unwrap();
        let f1 = align_depth_global(&pred[1..], &gt[1..], None).unwrap();
        assert!((f0.0 - 1.0).abs() < 1e-12 && (f1.0 - 2.0).abs() < 1e-12);
        assert!((joint.0 - f0.0).abs() > 0.1 && (joint.0 - f1.0).abs() > 0.1);
    }

    #[test]
    fn constant_gt_falls_back_to_shift() {
        let gt = maps(&[&[0.5, 0.5, 0.5]]);
        let pred = maps(&[&[0.1, 0.2, 0.3]]);
        let (s, t) = align_depth_global(&pred, &gt, None).unwrap();
        assert_eq!(s, 1.0);
        assert!((t - 0.3).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_depth_metrics() {
        let gt = maps(&[&[1.0, 0.5, 0.25]]);
        let pred = maps(&[&[1.0 / 1.1, 1.0 / 2.2, 1.0 / 4.4]]);
        let r = depth_metrics(&pred, &gt, None).unwrap();
        assert!((r.abs_rel - 0.1).abs() < 1e-12);
        assert_eq!(r.delta_125, 100.0);

        let pred = maps(&[&[1.0 / 1.3, 1.0 / 2.6, 1.0 / 5.2]]);
        let r = depth_metrics(&pred, &gt, None).unwrap();
        assert!((r.abs_rel - 0.3).abs() < 1e-12);
        assert_eq!(r.delta_125, 0.0);
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let gt = maps(&[&[1.0, 0.0, 0.5]]);
        let pred = maps(&[&[1.0, 7.0, 0.5]]);
        let r = evaluate_depth(&pred, &gt, None).unwrap();
        assert_eq!(r.pixels, 2);
        assert!(r.abs_rel < 1e-12);
        let mask = vec![Grid::from_vec(1, 3, vec![true, true, false])];
        assert_eq!(depth_metrics(&pred, &gt, Some(&mask)).unwrap().pixels, 1);
        assert_eq!(
            depth_metrics(&pred, &maps(&[&[0.0, 0.0, 0.0]]), None),
            Err(MetricsError::NoValidPixels)
        );
    }

    fn random_trajectory(seed: u64, n: usize) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
                Pose::new(
                    rotation_about_axis(&axis, rng.random_range(-1.0..1.0)),
                    Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                )
            })
            .collect()
    }

    #[test]
    fn identical_trajectories() {
        let gt = random_trajectory(3, 10);
        let r = traj_metrics(&gt, &gt, 1).unwrap();
        assert!(r.ate < 1e-12 && r.rpe_t < 1e-12 && r.rpe_r < 1e-6);
    }

    #[test]
    fn hand_computed_ate() {
        let axes = [
            Vector3::zeros(),
            Vector3::x(),
            -Vector3::x(),
            Vector3::y(),
            -Vector3::y(),
            Vector3::z(),
            -Vector3::z(),
        ];
        let gt: Vec<Pose> = axes.iter().map(|c| Pose::new(Matrix3::identity(), *c)).collect();
        let shift = Vector3::new(0.1, 0.0, 0.0);
        let pred: Vec<Pose> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| Pose::new(p.rotation, if i == 0 { p.center } else { p.center + shift }))
            .collect();
        // Centered perturbations: frame 0 gets -6/7·0.1, the rest +1/7·0.1.
        let e: Vec<Vector3<f64>> = (0..7)
            .map(|i| if i == 0 { -shift * 6.0 / 7.0 } else { shift / 7.0 })
            .collect();
        let sg: f64 = axes.iter().map(|g| g.norm_squared()).sum();
        let se: f64 = e.iter().map(|v| v.norm_squared()).sum();
        let lambda = sg / (sg + se);
        let expect = (axes
            .iter()
            .zip(&e)
            .map(|(g, e)| (g * (lambda - 1.0) + e * lambda).norm_squared())
            .sum::<f64>()
            / 7.0)
            .sqrt();
        let r = traj_metrics(&pred, &gt, 1).unwrap();
        assert!((r.ate - expect).abs() < 1e-12, "{} vs {expect}", r.ate);
        assert!(r.ate > 0.0);
    }

    #[test]
    fn collinear_trajectories_still_align() {
        let gt: Vec<Pose> = (0..6)
            .map(|i| Pose::new(rot_y(0.1 * i as f64), Vector3::new(0.0, 0.0, i as f64)))
            .collect();
        let sim = Similarity::new(0.4, rot_x(0.8), Vector3::new(1.0, -2.0, 0.5));
        let pred: Vec<Pose> = gt.iter().map(|p| sim.transform_pose(p)).collect();
        let r = traj_metrics(&pred, &gt, 1).unwrap();
        assert!(r.ate < 1e-9 && r.rpe_t < 1e-9 && r.rpe_r < 1e-6, "{r:?}");
    }

    #[test]
    fn trajectory_errors() {
        let gt = random_trajectory(4, 5);
        assert!(matches!(traj_metrics(&gt[..4], &gt, 1), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(traj_metrics(&gt[..2], &gt[..2], 1), Err(MetricsError::TooFewPoses { .. })));
    }

    #[test]
    fn reports_round_trip_through_kv() {
        let gt = random_maps(5, 2);
        let r = evaluate_depth(&gt, &gt, None).unwrap();
        let kv = parse_kv(&r.to_kv());
        assert_eq!(kv["abs_rel"].parse::<f64>().unwrap(), r.abs_rel);
        assert_eq!(kv["frame.1.pixels"], "48");
        let t = traj_metrics(&random_trajectory(6, 5), &random_trajectory(7, 5), 1).unwrap();
        assert_eq!(parse_kv(&t.to_kv())["ate"].parse::<f64>().unwrap(), t.ate);
    }

    proptest! {
        #[test]
        fn depth_metrics_are_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in -0.5f64..0.5) {
            let gt = random_maps(seed, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let pred: Vec<_> = gt.iter().map(|g| g.map(|d| d * rng.random_range(0.8..1.25))).collect();
            let moved: Vec<_> = pred.iter().map(|p| p.map(|d| a * d + b)).collect();
            prop_assume!(moved.iter().all(|m| m.as_slice().iter().all(|d| *d > 0.0)));
            let r0 = evaluate_depth(&pred, &gt, None).unwrap();
            let r1 = evaluate_depth(&moved, &gt, None).unwrap();
            prop_assert!((r0.abs_rel - r1.abs_rel).abs() < 1e-9);
            prop_assert!((r0.delta_125 - r1.delta_125).abs() < 1e-9);
        }

        #[test]
        fn trajectory_metrics_ignore_a_global_similarity(
            seed in 0u64..1000,
            scale in 0.1f64..10.0,
            angle in -3.0f64..3.0,
            tx in -5.0f64..5.0,
        ) {
            let gt = random_trajectory(seed, 8);
            let sim = Similarity::new(scale, rotation_about_axis(&Vector3::new(1.0, 2.0, -0.5), angle), Vector3::new(tx, 1.0, -tx));
            let pred: Vec<Pose> = gt.iter().map(|p| sim.transform_pose(p)).collect();
            let r = traj_metrics(&pred, &gt, 1).unwrap();
            prop_assert!(r.ate < 1e-9 && r.rpe_t < 1e-9 && r.rpe_r < 1e-9 * 180.0, "{:?}", r);
        }

        #[test]
        fn rigid_motion_leaves_relative_poses(seed in 0u64..1000, angle in -3.0f64..3.0) {
            let gt = random_trajectory(seed, 6);
            let sim = Similarity::new(1.0, rot_x(angle), Vector3::new(0.3, -0.7, 2.0));
            let moved: Vec<Pose> = gt.iter().map(|p| sim.transform_pose(p)).collect();
            for i in 0..5 {
                let (ra, ta) = relative(&gt[i], &gt[i + 1]);
                let (rb, tb) = relative(&moved[i], &moved[i + 1]);
                prop_assert!((ra - rb).norm() < 1e-9 && (ta - tb).norm() < 1e-9);
            }
        }
    }
}
