//! Perspective-n-point from dense pixel ↔ point correspondences.
//!
//! The minimal solver inside RANSAC is the 6-point linear (DLT) estimate of
//! the calibrated projection `[R | t]`; the consensus pose is refined by
//! Gauss-Newton on the reprojection error of its inliers.

use super::InitError;
use crate::geometry::{Grid, Intrinsics, PointMap, Pose};
use crate::ray_solver::rq_decompose;
use nalgebra::{Matrix3, Matrix3x4, SMatrix, SVector, SymmetricEigen, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions {
    pub iterations: usize,
    /// Inlier threshold on the reprojection error, in pixels.
    pub threshold_px: f64,
    pub seed: u64,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self {
            iterations: 256,
            threshold_px: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    pub pose: Pose,
    pub inliers: Grid<bool>,
    pub inlier_ratio: f64,
}

/// Linear estimate of the 3x4 projection mapping `points` onto the image
/// rays `rays` (homogeneous, any scale), from at least 6 correspondences.
/// Returns the matrix with `det(P[:, :3]) > 0`.
pub fn dlt_projection(
    points: &[Vector3<f64>],
    rays: &[Vector3<f64>],
) -> Result<Matrix3x4<f64>, InitError> {
    let n = points.len();
    if n < 6 {
        return Err(InitError::InsufficientPoints { got: n, need: 6 });
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / n as f64;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n as f64;
    if !(mean_dist > 0.0) {
        return Err(InitError::DegenerateCorrespondence(
            "all 3D points coincide".into(),
        ));
    }
    let k = 3f64.sqrt() / mean_dist;

    let mut ata = SMatrix::<f64, 12, 12>::zeros();
    for (p, r) in points.iter().zip(rays) {
        let x = (p - centroid) * k;
        let xh = [x.x, x.y, x.z, 1.0];
        let (a, b) = (r.x / r.z, r.y / r.z);
        let mut row1 = SVector::<f64, 12>::zeros();
        let mut row2 = SVector::<f64, 12>::zeros();
        for j in 0..4 {
            row1[4 + j] = -xh[j];
            row1[8 + j] = b * xh[j];
            row2[j] = xh[j];
            row2[8 + j] = -a * xh[j];
        }
        ata += row1 * row1.transpose() + row2 * row2.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("12 eigenvalues");
    let h = eig.eigenvectors.column(imin);
    let pn = Matrix3x4::from_fn(|r, c| h[4 * r + c]);
    // Undo the point normalization: P = P_n [kI, -k c; 0, 1].
    let mut p = Matrix3x4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(pn.fixed_view::<3, 3>(0, 0) * k));
    let last = pn.column(3) - pn.fixed_view::<3, 3>(0, 0) * centroid * k;
    p.set_column(3, &last);
    let det = p.fixed_view::<3, 3>(0, 0).determinant();
    if !det.is_finite() || det == 0.0 {
        return Err(InitError::DegenerateCorrespondence(
            "projection estimate is singular".into(),
        ));
    }
    if det < 0.0 {
        p = -p;
    }
    Ok(p)
}

/// Calibrated pose from a projection `P ≃ [R | t]` (rays already multiplied by `K^-1`).
fn pose_from_calibrated_projection(p: &Matrix3x4<f64>) -> Pose {
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let scale = svd.singular_values.mean();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        r = -r;
    }
    Pose::from_rt(r, p.column(3) / scale)
}

/// Full camera `(K, pose)` from an uncalibrated projection matrix.
pub fn camera_from_projection(p: &Matrix3x4<f64>) -> Result<(Matrix3<f64>, Pose), InitError> {
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let (k, r) = rq_decompose(&m).map_err(|e| InitError::DegenerateCorrespondence(e.to_string()))?;
    // P = s K [R | t] with s > 0 because det(M) > 0.
    let s = (m * r.transpose())[(2, 2)];
    let k_inv = k.try_inverse().ok_or_else(|| {
        InitError::DegenerateCorrespondence("recovered intrinsics are singular".into())
    })?;
    let t = k_inv * p.column(3) / s;
    Ok((k, Pose::from_rt(r, t)))
}

fn reprojection_error(k: &Intrinsics, pose: &Pose, x: &Vector3<f64>, pixel: &Vector2<f64>) -> f64 {
    let c = pose.world_to_camera(x);
    if c.z <= 0.0 {
        return f64::INFINITY;
    }
    let (u, v) = k.project(&c);
    ((u - pixel.x).powi(2) + (v - pixel.y).powi(2)).sqrt()
}

/// Gauss-Newton on the reprojection error over `(R, t)` with a left
/// perturbation `x_c -> exp(ω) x_c + δ`.
pub fn refine_pose(
    k: &Intrinsics,
    pose: &Pose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    iterations: usize,
) -> Pose {
    let mut r = pose.rotation;
    let mut t = pose.translation();
    let cost = |r: &Matrix3<f64>, t: &Vector3<f64>| -> f64 {
        points
            .iter()
            .zip(pixels)
            .map(|(x, px)| {
                let c = r * x + t;
                let (u, v) = k.project(&c);
                (u - px.x).powi(2) + (v - px.y).powi(2)
            })
            .sum()
    };
    let mut current = cost(&r, &t);
    for _ in 0..iterations {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for (x, px) in points.iter().zip(pixels) {
            let c = r * x + t;
            if c.z <= 0.0 {
                continue;
            }
            let iz = 1.0 / c.z;
            let (u, v) = k.project(&c);
            let res = Vector2::new(u - px.x, v - px.y);
            let dproj = SMatrix::<f64, 2, 3>::new(
                k.fx * iz,
                0.0,
                -k.fx * c.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * c.y * iz * iz,
            );
            let mut dc = SMatrix::<f64, 3, 6>::zeros();
            // d(exp(ω) c)/dω = -[c]x
            dc.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::new(
                0.0, c.z, -c.y, -c.z, 0.0, c.x, c.y, -c.x, 0.0,
            ));
            dc.fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&Matrix3::identity());
            let j = dproj * dc;
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let Some(chol) = (jtj + SMatrix::<f64, 6, 6>::identity() * 1e-12 * jtj.trace()).cholesky()
        else {
            break;
        };
        let delta = -chol.solve(&jtr);
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let dr = nalgebra::Rotation3::new(omega).into_inner();
        let r_new = dr * r;
        let t_new = dr * t + Vector3::new(delta[3], delta[4], delta[5]);
        let next = cost(&r_new, &t_new);
        if !(next <= current) {
            break;
        }
        let converged = delta.norm() < 1e-15 || current - next <= 1e-16 * current;
        r = r_new;
        t = t_new;
        current = next;
        if converged {
            break;
        }
    }
    Pose::from_rt(r, t)
}

/// Robust pose of the camera that sees `points[uv]` at pixel `uv`.
///
/// Only pixels with `mask[uv] == true` take part. Deterministic for a fixed
/// seed.
pub fn ransac_pnp(
    points: &PointMap,
    mask: &Grid<bool>,
    k: &Intrinsics,
    options: &PnpOptions,
) -> Result<PnpResult, InitError> {
    let (height, width) = points.shape();
    let mut world = Vec::new();
    let mut pixels = Vec::new();
    let mut flat = Vec::new();
    for idx in 0..points.len() {
        let x = points.as_slice()[idx];
        if mask.as_slice()[idx] && x.iter().all(|c| c.is_finite()) {
            let (v, u) = points.coords(idx);
            world.push(x);
            pixels.push(Vector2::new(u as f64, v as f64));
            flat.push(idx);
        }
    }
    let n = world.len();
    if n < 6 {
        return Err(InitError::InsufficientPoints { got: n, need: 6 });
    }
    let rays: Vec<Vector3<f64>> = pixels.iter().map(|p| k.unproject(p.x, p.y)).collect();

    let count_inliers = |pose: &Pose| -> usize {
        world
            .iter()
            .zip(&pixels)
            .filter(|(x, px)| reprojection_error(k, pose, x, px) < options.threshold_px)
            .count()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut best: Option<(usize, Pose)> = None;
    let mut sample_pts = Vec::with_capacity(6);
    let mut sample_rays = Vec::with_capacity(6);
    for _ in 0..options.iterations {
        let chosen = sample(&mut rng, n, 6);
        sample_pts.clear();
        sample_rays.clear();
        for i in chosen.iter() {
            sample_pts.push(world[i]);
            sample_rays.push(rays[i]);
        }
        let Ok(p) = dlt_projection(&sample_pts, &sample_rays) else {
            continue;
        };
        let pose = pose_from_calibrated_projection(&p);
        let count = count_inliers(&pose);
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, pose));
            if count == n {
                break;
            }
        }
    }
    let (count, mut pose) = best.ok_or(InitError::PnpFailure { inlier_ratio: 0.0 })?;
    if (count as f64) < 0.1 * n as f64 {
        return Err(InitError::PnpFailure {
            inlier_ratio: count as f64 / n as f64,
        });
    }

    // Re-estimate on the consensus set, then refine.
    for _ in 0..2 {
        let (in_pts, in_px): (Vec<_>, Vec<_>) = world
            .iter()
            .zip(&pixels)
            .filter(|(x, px)| reprojection_error(k, &pose, x, px) < options.threshold_px)
            .map(|(x, px)| (*x, *px))
            .unzip();
        if in_pts.len() < 6 {
            break;
        }
        let in_rays: Vec<_> = in_px.iter().map(|p| k.unproject(p.x, p.y)).collect();
        if let Ok(p) = dlt_projection(&in_pts, &in_rays) {
            let candidate = pose_from_calibrated_projection(&p);
            if count_inliers(&candidate) >= count_inliers(&pose) {
                pose = candidate;
            }
        }
        pose = refine_pose(k, &pose, &in_pts, &in_px, 30);
    }

    let mut inliers = Grid::filled(height, width, false);
    let mut total = 0usize;
    for (j, &idx) in flat.iter().enumerate() {
        if reprojection_error(k, &pose, &world[j], &pixels[j]) < options.threshold_px {
            inliers.as_mut_slice()[idx] = true;
            total += 1;
        }
    }
    let inlier_ratio = total as f64 / n as f64;
    if inlier_ratio < 0.1 {
        return Err(InitError::PnpFailure { inlier_ratio });
    }
    Ok(PnpResult {
        pose,
        inliers,
        inlier_ratio,
    })
}
