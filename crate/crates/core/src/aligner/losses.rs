//! The four alignment objectives and their analytic gradients.
//!
//! Every function returns the unweighted loss and, when a gradient buffer is
//! supplied, adds `weight * ∂loss/∂params` into it. Summation order is fixed
//! (group, frame, row, column) so results are bit-reproducible.

use super::state::*;
use super::Robust;
use crate::geometry::{image_center, matrix_from_quaternion, quaternion_gradient};
use crate::ray_solver::{camera_from_raymap, RayCameraSolution};
use crate::windowing::WindowGroup;
use nalgebra::{Matrix3, Vector3};

/// A valid predicted pixel: flat index and `1/σ`.
#[derive(Debug, Clone, Copy)]
pub struct Entry {
    pub idx: u32,
    pub inv_sigma: f64,
}

/// Predictions plus everything precomputed once per run.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub groups: &'a [WindowGroup],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `entries[g][local]`: valid pixels of that prediction.
    pub entries: Vec<Vec<Vec<Entry>>>,
    /// `ray_solutions[g][local]`, `None` where unavailable or failed.
    pub ray_solutions: Vec<Vec<Option<RayCameraSolution>>>,
    pub ray_failures: usize,
}

impl<'a> Problem<'a> {
    pub fn new(groups: &'a [WindowGroup], frames: usize, sigma_floor: f64, d_min: f64) -> Self {
        let (height, width) = groups.first().map(|g| g.shape()).unwrap_or((0, 0));
        let entries = groups
            .iter()
            .map(|group| {
                (0..group.len())
                    .map(|l| {
                        let pts = group.points[l].as_slice();
                        let disp = group.disparity[l].as_slice();
                        let sig = group.uncertainty[l].as_slice();
                        (0..pts.len())
                            .filter(|&i| {
                                disp[i] >= d_min
                                    && pts[i].iter().all(|c| c.is_finite())
                                    && sig[i].is_finite()
                            })
                            .map(|i| Entry {
                                idx: i as u32,
                                inv_sigma: 1.0 / sig[i].max(sigma_floor),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut ray_failures = 0;
        let ray_solutions = groups
            .iter()
            .map(|group| match &group.rays {
                None => vec![None; group.len()],
                Some(rays) => rays
                    .iter()
                    .map(|r| match camera_from_raymap(r) {
                        Ok(s) => Some(s),
                        Err(e) => {
                            log::warn!("ray solve failed in group {}: {e}", group.start);
                            ray_failures += 1;
                            None
                        }
                    })
                    .collect(),
            })
            .collect();
        Self {
            groups,
            frames,
            height,
            width,
            entries,
            ray_solutions,
            ray_failures,
        }
    }

    pub fn has_rays(&self) -> bool {
        self.ray_solutions.iter().flatten().any(|s| s.is_some())
    }
}

/// Scalar robust penalty and its derivative.
#[inline]
fn rho(robust: Robust, x: f64) -> (f64, f64) {
    match robust {
        Robust::Huber { delta } => {
            let a = x.abs();
            if a <= delta {
                (0.5 * x * x / delta, x / delta)
            } else {
                (a - 0.5 * delta, x.signum())
            }
        }
        Robust::L1 => {
            let d = if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
            (x.abs(), d)
        }
    }
}

/// Robust penalty of a norm `n = |e|`; returns the value and `c` such that
/// the gradient w.r.t. `e` is `c e`.
#[inline]
fn rho_norm(robust: Robust, sq_norm: f64) -> (f64, f64) {
    let n = sq_norm.sqrt();
    match robust {
        Robust::Huber { delta } => {
            if n <= delta {
                (0.5 * sq_norm / delta, 1.0 / delta)
            } else {
                (n - 0.5 * delta, 1.0 / n)
            }
        }
        Robust::L1 => (n, if n > 0.0 { 1.0 / n } else { 0.0 }),
    }
}

fn add_quat_grad(grad: &mut [f64], at: usize, q: &[f64; 4], g_r: &Matrix3<f64>, weight: f64) {
    let gq = quaternion_gradient(q, g_r);
    for k in 0..4 {
        grad[at + k] += weight * gq[k];
    }
}

fn add_vec(grad: &mut [f64], at: usize, v: &Vector3<f64>, weight: f64) {
    for k in 0..3 {
        grad[at + k] += weight * v[k];
    }
}

/// Camera-frame rays `K^-1 (u, v, 1)` for a focal at the image center.
fn frame_rays(state: &GlobalState, i: usize) -> Vec<Vector3<f64>> {
    let f = state.focal(i);
    let (cx, cy) = image_center(state.width, state.height);
    let mut out = Vec::with_capacity(state.pixels());
    for v in 0..state.height {
        for u in 0..state.width {
            out.push(Vector3::new((u as f64 - cx) / f, (v as f64 - cy) / f, 1.0));
        }
    }
    out
}

/// Point-map alignment: `Σ_g Σ_i Σ_uv Σ_k ρ(X^i_uv - λ_p R_p X^{i,g}_uv - β_p)_k / σ_uv`,
/// with `X^i_uv = R_iᵀ K_i⁻¹ (u,v,1) / D_uv + o_i`.
pub fn loss_point(
    state: &GlobalState,
    problem: &Problem,
    robust: Robust,
    grad: Option<&mut [f64]>,
    weight: f64,
) -> f64 {
    let n = state.pixels();
    // Camera-frame points p = ray / D and world points per frame.
    let mut cam_pts: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(state.frames);
    let mut world: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(state.frames);
    let mut rots = Vec::with_capacity(state.frames);
    for i in 0..state.frames {
        let rays = frame_rays(state, i);
        let r = state.rotation(i);
        let o = state.center(i);
        let logd = state.log_disparity(i);
        let p: Vec<Vector3<f64>> = rays
            .iter()
            .zip(logd)
            .map(|(ray, l)| ray * (-l).exp())
            .collect();
        let rt = r.transpose();
        world.push(p.iter().map(|p| rt * p + o).collect());
        cam_pts.push(p);
        rots.push(r);
    }
    let want_grad = grad.is_some();
    let mut g_world: Vec<Vec<Vector3<f64>>> = if want_grad {
        vec![vec![Vector3::zeros(); n]; state.frames]
    } else {
        Vec::new()
    };
    let mut group_grads = vec![(0.0, Matrix3::zeros(), Vector3::zeros()); state.groups()];

    let mut total = 0.0;
    for (g, group) in problem.groups.iter().enumerate() {
        let sim = state.point_similarity(g);
        let sr = sim.rotation * sim.scale;
        for (local, entries) in problem.entries[g].iter().enumerate() {
            let i = group.start + local;
            let pred = group.points[local].as_slice();
            for e in entries {
                let idx = e.idx as usize;
                let x = pred[idx];
                let y = sr * x + sim.translation;
                let r = world[i][idx] - y;
                let mut gr = Vector3::zeros();
                for k in 0..3 {
                    let (val, d) = rho(robust, r[k]);
                    total += val * e.inv_sigma;
                    gr[k] = d * e.inv_sigma;
                }
                if want_grad {
                    g_world[i][idx] += gr;
                    let gg = &mut group_grads[g];
                    // y = λ R x + β, residual = X - y
                    gg.0 -= gr.dot(&(sr * x));
                    gg.1 -= gr * x.transpose() * sim.scale;
                    gg.2 -= gr;
                }
            }
        }
    }

    if let Some(grad) = grad {
        for (g, (dlog, dr, dbeta)) in group_grads.iter().enumerate() {
            let o = state.group_offset(g);
            grad[o + G_POINT_LOG_SCALE] += weight * dlog;
            add_quat_grad(grad, o + G_POINT_QUAT, &state.quat(o + G_POINT_QUAT), dr, weight);
            add_vec(grad, o + G_POINT_SHIFT, dbeta, weight);
        }
        for i in 0..state.frames {
            let fo = state.frame_offset(i);
            let dofs = state.disparity_offset(i);
            let r = &rots[i];
            let mut d_center = Vector3::zeros();
            let mut d_rot = Matrix3::zeros();
            let mut d_logf = 0.0;
            for idx in 0..n {
                let gx = g_world[i][idx];
                if gx == Vector3::zeros() {
                    continue;
                }
                let p = cam_pts[i][idx];
                d_center += gx;
                // X = Rᵀ p + o
                d_rot += p * gx.transpose();
                let gp = r * gx;
                // p = ray / D with D = exp(l): ∂p/∂l = -p
                grad[dofs + idx] -= weight * gp.dot(&p);
                // ray_xy = (u - c) / f with f = exp(lf): ∂p_xy/∂lf = -p_xy
                d_logf -= gp.x * p.x + gp.y * p.y;
            }
            grad[fo + F_LOG_FOCAL] += weight * d_logf;
            add_quat_grad(grad, fo + F_QUAT, &state.quat(fo + F_QUAT), &d_rot, weight);
            add_vec(grad, fo + F_CENTER, &d_center, weight);
        }
    }
    total
}

/// Disparity alignment: `Σ_g Σ_i Σ_uv ρ(D^i_uv - λ_d D_d^{i,g}_uv - β_d)`.
pub fn loss_depth(
    state: &GlobalState,
    problem: &Problem,
    robust: Robust,
    mut grad: Option<&mut [f64]>,
    weight: f64,
) -> f64 {
    let mut total = 0.0;
    for (g, group) in problem.groups.iter().enumerate() {
        let (scale, shift) = state.depth_affine(g);
        let go = state.group_offset(g);
        let (mut d_log_scale, mut d_shift) = (0.0, 0.0);
        for (local, entries) in problem.entries[g].iter().enumerate() {
            let i = group.start + local;
            let logd = state.log_disparity(i);
            let pred = group.disparity[local].as_slice();
            let dofs = state.disparity_offset(i);
            for e in entries {
                let idx = e.idx as usize;
                let d = logd[idx].exp();
                let r = d - scale * pred[idx] - shift;
                let (val, dr) = rho(robust, r);
                total += val;
                if let Some(grad) = grad.as_deref_mut() {
                    grad[dofs + idx] += weight * dr * d;
                    d_log_scale -= dr * scale * pred[idx];
                    d_shift -= dr;
                }
            }
        }
        if let Some(grad) = grad.as_deref_mut() {
            grad[go + G_DEPTH_LOG_SCALE] += weight * d_log_scale;
            grad[go + G_DEPTH_SHIFT] += weight * d_shift;
        }
    }
    total
}

/// Camera trajectory alignment:
/// `Σ_g Σ_i ρ(|R_iᵀ R_c^{i,g} R_c^g - I|_F) + ρ(|λ_c R_c^gᵀ o_c^{i,g} + β_c - o_i|)`.
pub fn loss_cam(
    state: &GlobalState,
    problem: &Problem,
    robust: Robust,
    mut grad: Option<&mut [f64]>,
    weight: f64,
) -> f64 {
    let mut total = 0.0;
    for (g, group) in problem.groups.iter().enumerate() {
        let go = state.group_offset(g);
        let (rg, scale, shift) = state.cam_alignment(g);
        let mut d_rg = Matrix3::zeros();
        let mut d_log_scale = 0.0;
        let mut d_shift = Vector3::zeros();
        for (local, sol) in problem.ray_solutions[g].iter().enumerate() {
            let Some(sol) = sol else { continue };
            let i = group.start + local;
            let fo = state.frame_offset(i);
            let ri = state.rotation(i);
            let m = sol.rotation * rg;
            let e = ri.transpose() * m - Matrix3::identity();
            let (val, c) = rho_norm(robust, e.norm_squared());
            total += val;

            let rotated = rg.transpose() * sol.center;
            let y = scale * rotated + shift - state.center(i);
            let (val_t, ct) = rho_norm(robust, y.norm_squared());
            total += val_t;

            if let Some(grad) = grad.as_deref_mut() {
                // A = R_iᵀ M: ∂/∂R_i = M Gᵀ, ∂/∂M = R_i G
                let ga = e * c;
                let d_ri = m * ga.transpose();
                d_rg += sol.rotation.transpose() * (ri * ga);
                add_quat_grad(grad, fo + F_QUAT, &state.quat(fo + F_QUAT), &d_ri, weight);

                let gy = y * ct;
                d_shift += gy;
                add_vec(grad, fo + F_CENTER, &gy, -weight);
                d_log_scale += gy.dot(&(scale * rotated));
                // y ∋ λ R_gᵀ o_c: ∂/∂R_g = λ o_c gyᵀ
                d_rg += sol.center * gy.transpose() * scale;
            }
        }
        if let Some(grad) = grad.as_deref_mut() {
            grad[go + G_CAM_LOG_SCALE] += weight * d_log_scale;
            add_quat_grad(grad, go + G_CAM_QUAT, &state.quat(go + G_CAM_QUAT), &d_rg, weight);
            add_vec(grad, go + G_CAM_SHIFT, &d_shift, weight);
        }
    }
    total
}

/// Trajectory smoothness: `Σ_i ρ(|R_iᵀ R_{i+1} - I|_F) + ρ(|o_{i+1} - o_i|)`.
pub fn loss_smooth(
    state: &GlobalState,
    robust: Robust,
    mut grad: Option<&mut [f64]>,
    weight: f64,
) -> f64 {
    let mut total = 0.0;
    if state.frames < 2 {
        return 0.0;
    }
    let rots: Vec<Matrix3<f64>> = (0..state.frames).map(|i| state.rotation(i)).collect();
    for i in 0..state.frames - 1 {
        let e = rots[i].transpose() * rots[i + 1] - Matrix3::identity();
        let (val, c) = rho_norm(robust, e.norm_squared());
        let dt = state.center(i + 1) - state.center(i);
        let (val_t, ct) = rho_norm(robust, dt.norm_squared());
        total += val + val_t;
        if let Some(grad) = grad.as_deref_mut() {
            let ga = e * c;
            let (a, b) = (state.frame_offset(i), state.frame_offset(i + 1));
            add_quat_grad(grad, a + F_QUAT, &state.quat(a + F_QUAT), &(rots[i + 1] * ga.transpose()), weight);
            add_quat_grad(grad, b + F_QUAT, &state.quat(b + F_QUAT), &(rots[i] * ga), weight);
            let gt = dt * ct;
            add_vec(grad, b + F_CENTER, &gt, weight);
            add_vec(grad, a + F_CENTER, &gt, -weight);
        }
    }
    total
}

/// Rotation of the quaternion block at `at`, for tests and closed forms.
#[allow(dead_code)]
pub(crate) fn block_rotation(state: &GlobalState, at: usize) -> Matrix3<f64> {
    matrix_from_quaternion(&state.quat(at))
}
