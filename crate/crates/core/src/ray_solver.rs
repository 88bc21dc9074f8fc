//! Camera recovery from Plücker ray maps.
//!
//! The center is the least-squares point closest to every ray
//! (`argmin_p Σ |p x d - m|^2`). Rotation and intrinsics come from the
//! homography `H` mapping predicted directions onto canonical pixel
//! directions `(u, v, 1)`, split into `K R` by an RQ decomposition.

use crate::geometry::{Intrinsics, RayMap};
use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RaySolveError {
    #[error("ray directions are (nearly) parallel; the center is not determined")]
    RankDeficient,
    #[error("ray directions are degenerate; the direction homography is not determined")]
    DegenerateRays,
    #[error("matrix is singular; RQ decomposition undefined")]
    Singular,
    #[error("ray map has non-finite entries")]
    NonFinite,
}

/// Camera recovered from a ray map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayCameraSolution {
    pub center: Vector3<f64>,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub intrinsics: Intrinsics,
    /// Skew entry of the recovered upper-triangular intrinsics (ignored downstream).
    pub skew: f64,
    /// RMS of `|p x d - m|` at the recovered center.
    pub center_rms: f64,
    /// RMS of `|Ĥd × û|` over unit vectors.
    pub direction_rms: f64,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Point closest to all rays, with the RMS residual `|p x d - m|`.
pub fn solve_center(rays: &RayMap) -> Result<(Vector3<f64>, f64), RaySolveError> {
    // Normal equations: Σ(|d|² I - d dᵀ) p = Σ d x m.
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (d, m) in rays
        .directions
        .as_slice()
        .iter()
        .zip(rays.moments.as_slice())
    {
        if !(d.iter().all(|x| x.is_finite()) && m.iter().all(|x| x.is_finite())) {
            return Err(RaySolveError::NonFinite);
        }
        a += Matrix3::identity() * d.norm_squared() - d * d.transpose();
        b += d.cross(m);
    }
    let eig = SymmetricEigen::new(a);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= 1e-9 * max {
        return Err(RaySolveError::RankDeficient);
    }
    let p = a.cholesky().ok_or(RaySolveError::RankDeficient)?.solve(&b);
    let n = rays.directions.len() as f64;
    let ss: f64 = rays
        .directions
        .as_slice()
        .iter()
        .zip(rays.moments.as_slice())
        .map(|(d, m)| (p.cross(d) - m).norm_squared())
        .sum();
    Ok((p, (ss / n).sqrt()))
}

/// Similarity normalization of the canonical pixel directions.
fn canonical_normalizer(width: usize, height: usize) -> Matrix3<f64> {
    let (mu, mv) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let mut mean_dist = 0.0;
    for v in 0..height {
        for u in 0..width {
            mean_dist += ((u as f64 - mu).powi(2) + (v as f64 - mv).powi(2)).sqrt();
        }
    }
    mean_dist /= (width * height) as f64;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mu, 0.0, s, -s * mv, 0.0, 0.0, 1.0)
}

/// `argmin_{|H|_F = 1} Σ |H d_uv × (u, v, 1)|`, solved as the smallest
/// eigenvector of the stacked cross-product constraints. Directions are
/// normalized first. The sign is fixed so the center pixel's direction maps
/// to a positive third component.
pub fn solve_h(rays: &RayMap, width: usize, height: usize) -> Result<Matrix3<f64>, RaySolveError> {
    assert_eq!((rays.width(), rays.height()), (width, height), "ray map size");
    let t = canonical_normalizer(width, height);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for v in 0..height {
        for u in 0..width {
            let d = rays.directions.at(v, u);
            if !d.iter().all(|x| x.is_finite()) {
                return Err(RaySolveError::NonFinite);
            }
            let n = d.norm();
            if !(n > 0.0) {
                continue;
            }
            let d = d / n;
            let c = t * Vector3::new(u as f64, v as f64, 1.0);
            let neg_cx = -skew(&c);
            // Row r of the constraint: Σ_a (-[c]x)_{ra} Σ_b H_ab d_b.
            for r in 0..3 {
                let mut row = SMatrix::<f64, 1, 9>::zeros();
                for a in 0..3 {
                    let w = neg_cx[(r, a)];
                    if w == 0.0 {
                        continue;
                    }
                    for b in 0..3 {
                        row[3 * a + b] = w * d[b];
                    }
                }
                ata += row.transpose() * row;
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let largest = eig.eigenvalues[order[8]];
    if !(largest > 0.0) || eig.eigenvalues[order[1]] <= 1e-14 * largest {
        return Err(RaySolveError::DegenerateRays);
    }
    let h = eig.eigenvectors.column(order[0]);
    let hn = Matrix3::from_fn(|a, b| h[3 * a + b]);
    let t_inv = t.try_inverse().expect("normalizer invertible");
    let mut hm = t_inv * hn;
    hm /= hm.norm();
    let (cv, cu) = (height / 2, width / 2);
    if (hm * rays.directions.at(cv, cu))[2] < 0.0 {
        hm = -hm;
    }
    Ok(hm)
}

/// Splits `Hm ≃ K R` with `K` upper triangular, positive diagonal,
/// `K[2,2] = 1`, and `R` a proper rotation. The overall sign of `Hm` is free.
pub fn rq_decompose(hm: &Matrix3<f64>) -> Result<(Matrix3<f64>, Matrix3<f64>), RaySolveError> {
    let scale = hm.norm();
    if !(scale > 0.0) || !scale.is_finite() || hm.determinant().abs() <= 1e-12 * scale.powi(3) {
        return Err(RaySolveError::Singular);
    }
    // Flip rows, QR the transpose, flip back.
    let p = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (p * hm).transpose().qr();
    let (q, u) = (qr.q(), qr.r());
    let mut k = p * u.transpose() * p;
    let mut r = p * q.transpose();
    let signs = Matrix3::from_diagonal(&Vector3::from_fn(|i, _| {
        if k[(i, i)] < 0.0 {
            -1.0
        } else {
            1.0
        }
    }));
    k *= signs;
    r = signs * r;
    if r.determinant() < 0.0 {
        r = -r;
    }
    k /= k[(2, 2)];
    Ok((k, r))
}

/// Center, rotation and intrinsics encoded by a ray map.
pub fn camera_from_raymap(rays: &RayMap) -> Result<RayCameraSolution, RaySolveError> {
    let (center, center_rms) = solve_center(rays)?;
    let (w, h) = (rays.width(), rays.height());
    let hm = solve_h(rays, w, h)?;
    let (k, rotation) = rq_decompose(&hm)?;
    let mut ss = 0.0;
    let mut n = 0usize;
    for v in 0..h {
        for u in 0..w {
            let d = rays.directions.at(v, u);
            let mapped = hm * d;
            let target = Vector3::new(u as f64, v as f64, 1.0);
            if mapped.norm() > 0.0 {
                ss += mapped.normalize().cross(&target.normalize()).norm_squared();
                n += 1;
            }
        }
    }
    Ok(RayCameraSolution {
        center,
        rotation,
        intrinsics: Intrinsics::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]),
        skew: k[(0, 1)],
        center_rms,
        direction_rms: if n > 0 { (ss / n as f64).sqrt() } else { 0.0 },
    })
}
