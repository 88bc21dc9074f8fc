//! Closed-form modality alignments evaluated at the align-start iteration.

use super::losses::Problem;
use super::state::GlobalState;
use crate::geometry::project_to_rotation;
use nalgebra::{Matrix3, Vector3};

/// Least-squares scale and shift with `target ≈ λ · source + β`.
///
/// Returns `(1, mean(target) - mean(source))` when the source is constant or
/// the fit would produce a non-positive scale.
pub fn fit_scale_shift(source: &[f64], target: &[f64]) -> (f64, f64) {
    let n = source.len().min(target.len());
    if n == 0 {
        return (1.0, 0.0);
    }
    let ms = source[..n].iter().sum::<f64>() / n as f64;
    let mt = target[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (s, t) in source[..n].iter().zip(&target[..n]) {
        sxy += (s - ms) * (t - mt);
        sxx += (s - ms) * (s - ms);
    }
    let scale = sxy / sxx;
    if sxx <= 1e-12 * n as f64 * ms.abs().max(1.0).powi(2) || !scale.is_finite() || scale <= 0.0 {
        return (1.0, mt - ms);
    }
    (scale, mt - scale * ms)
}

/// Per-group `(λ_d, β_d)` from the ℓ₂ relaxation of the disparity loss.
pub fn align_depth_closed_form(state: &GlobalState, problem: &Problem) -> Vec<(f64, f64)> {
    problem
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let mut src = Vec::new();
            let mut dst = Vec::new();
            for (local, entries) in problem.entries[g].iter().enumerate() {
                let logd = state.log_disparity(group.start + local);
                let pred = group.disparity[local].as_slice();
                for e in entries {
                    let idx = e.idx as usize;
                    src.push(pred[idx]);
                    dst.push(logd[idx].exp());
                }
            }
            fit_scale_shift(&src, &dst)
        })
        .collect()
}

/// Per-group `(R_c, λ_c, β_c)` aligning the ray-derived cameras to the
/// current poses.
///
/// The rotation is the orthogonal polar factor of `Σ_i R_c^{i,gᵀ} R_i`; with
/// it fixed, scale and shift are the least-squares fit of the rotated ray
/// centers onto the current centers. Groups without any ray solution get the
/// identity.
pub fn align_cam_closed_form(
    state: &GlobalState,
    problem: &Problem,
) -> Vec<(Matrix3<f64>, f64, Vector3<f64>)> {
    problem
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let sols: Vec<_> = problem.ray_solutions[g]
                .iter()
                .enumerate()
                .filter_map(|(l, s)| s.as_ref().map(|s| (group.start + l, s)))
                .collect();
            if sols.is_empty() {
                return (Matrix3::identity(), 1.0, Vector3::zeros());
            }
            let mut acc = Matrix3::zeros();
            for (i, s) in &sols {
                acc += s.rotation.transpose() * state.rotation(*i);
            }
            let rg = project_to_rotation(&acc);
            let ys: Vec<Vector3<f64>> = sols.iter().map(|(_, s)| rg.transpose() * s.center).collect();
            let os: Vec<Vector3<f64>> = sols.iter().map(|(i, _)| state.center(*i)).collect();
            let n = ys.len() as f64;
            let ybar = ys.iter().sum::<Vector3<f64>>() / n;
            let obar = os.iter().sum::<Vector3<f64>>() / n;
            let (mut num, mut den) = (0.0, 0.0);
            for (y, o) in ys.iter().zip(&os) {
                num += (y - ybar).dot(&(o - obar));
                den += (y - ybar).norm_squared();
            }
            let scale = num / den;
            let spread = ybar.norm().max(1.0);
            if !(den > 1e-12 * n * spread * spread) || !scale.is_finite() || scale <= 0.0 {
                return (rg, 1.0, obar - ybar);
            }
            (rg, scale, obar - ybar * scale)
        })
        .collect()
}

/// Writes both closed forms into the state.
pub fn apply_closed_forms(state: &mut GlobalState, problem: &Problem) {
    for (g, (scale, shift)) in align_depth_closed_form(state, problem).into_iter().enumerate() {
        state.set_depth_affine(g, scale, shift);
    }
    for (g, (r, scale, shift)) in align_cam_closed_form(state, problem).into_iter().enumerate() {
        state.set_cam_alignment(g, &r, scale, &shift);
    }
}
