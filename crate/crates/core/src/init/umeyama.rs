//! Closed-form least-squares similarity between two point sets.

use super::InitError;
use crate::geometry::Similarity;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};

/// Similarity `(λ, R, β)` minimizing `Σ |dst - (λ R src + β)|²`.
///
/// With `with_scale = false` the scale is pinned to 1. Reflections are
/// removed by the determinant sign correction, so `R` is always proper.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Similarity, InitError> {
    assert_eq!(src.len(), dst.len(), "correspondence lists differ in length");
    let n = src.len();
    if n < 3 {
        return Err(InitError::DegenerateCorrespondence(format!(
            "need at least 3 correspondences, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_src = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_dst = dst.iter().sum::<Vector3<f64>>() * inv_n;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        let dc = d - mu_dst;
        cov += dc * sc.transpose();
        src_cov += sc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov *= inv_n;
    var_src *= inv_n;

    let mut spread = SymmetricEigen::new(src_cov * inv_n).eigenvalues;
    spread
        .as_mut_slice()
        .sort_by(|a, b| b.total_cmp(a));
    if !(spread[0] > 0.0) || spread[1] <= 1e-12 * spread[0] {
        return Err(InitError::DegenerateCorrespondence(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * vt.determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        signs[smallest] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * vt;
    let scale = if with_scale {
        svd.singular_values.dot(&signs) / var_src
    } else {
        1.0
    };
    let translation = mu_dst - scale * rotation * mu_src;
    Ok(Similarity::new(scale, rotation, translation))
}

/// `Σ |dst - (λ R src + β)|²`.
pub fn alignment_cost(sim: &Similarity, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| (d - sim.apply(s)).norm_squared())
        .sum()
}
