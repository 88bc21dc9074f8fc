//! Staged multi-modal alignment.
//!
//! Stage 1 fits the point-map objective (plus trajectory smoothness). At the
//! align-start iteration the disparity and ray-camera group parameters are
//! set in closed form, after which all four losses are minimized jointly.

mod adam;
mod closed_form;
mod losses;
mod state;

pub use adam::{cosine_factor, schedule_factor, Adam};
pub use closed_form::{align_cam_closed_form, align_depth_closed_form, apply_closed_forms, fit_scale_shift};
pub use losses::{loss_cam, loss_depth, loss_point, loss_smooth, Entry, Problem};
pub use state::{GlobalState, ParamClass, Reconstruction};

use crate::init::{initialize, InitConfig, InitError, InitState, PnpOptions};
use crate::windowing::{WindowGroup, WindowIndex};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Penalty applied to residual components and norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Robust {
    /// Quadratic inside `delta`, linear outside.
    Huber { delta: f64 },
    /// Plain absolute value.
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Weights of the point, disparity, camera and smoothness losses.
    pub alpha: [f64; 4],
    pub iters_total: usize,
    pub align_start: usize,
    pub lr_pose: f64,
    pub lr_focal: f64,
    pub lr_group: f64,
    pub lr_disparity: f64,
    /// Each stage decays its step sizes to this fraction of the base rate.
    pub lr_min_factor: f64,
    /// Linear warm-up length at the start of each stage.
    pub warmup_iters: usize,
    pub sigma_floor: f64,
    pub d_min: f64,
    pub robust: Robust,
    pub seed: u64,
    pub pnp_iterations: usize,
    pub pnp_threshold_px: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            alpha: [1.0, 0.5, 0.1, 0.01],
            iters_total: 500,
            align_start: 150,
            lr_pose: 1e-2,
            lr_focal: 1e-2,
            lr_group: 1e-2,
            lr_disparity: 1e-3,
            lr_min_factor: 1e-3,
            warmup_iters: 50,
            sigma_floor: crate::geometry::SIGMA_FLOOR,
            d_min: crate::geometry::DISPARITY_MIN,
            robust: Robust::Huber { delta: 1e-3 },
            seed: 0,
            pnp_iterations: 256,
            pnp_threshold_px: 3.0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |msg: String| Err(AlignError::InvalidConfig(msg));
        if self.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad(format!("loss weights must be finite and non-negative, got {:?}", self.alpha));
        }
        if self.iters_total > 0 && self.align_start >= self.iters_total {
            return bad(format!(
                "align_start {} must be below iters_total {}",
                self.align_start, self.iters_total
            ));
        }
        let rates = [self.lr_pose, self.lr_focal, self.lr_group, self.lr_disparity];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad(format!("learning rates must be finite and non-negative, got {rates:?}"));
        }
        if !(self.lr_min_factor > 0.0 && self.lr_min_factor <= 1.0) {
            return bad(format!("lr_min_factor must lie in (0, 1], got {}", self.lr_min_factor));
        }
        if !(self.sigma_floor > 0.0) || !(self.d_min >= 0.0) {
            return bad("sigma_floor must be positive and d_min non-negative".into());
        }
        if let Robust::Huber { delta } = self.robust {
            if !(delta > 0.0) {
                return bad(format!("Huber delta must be positive, got {delta}"));
            }
        }
        Ok(())
    }

    pub fn init_config(&self) -> InitConfig {
        InitConfig {
            pnp: PnpOptions {
                iterations: self.pnp_iterations,
                threshold_px: self.pnp_threshold_px,
                seed: self.seed,
            },
            ..InitConfig::default()
        }
    }

    fn rate(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::Pose => self.lr_pose,
            ParamClass::Focal => self.lr_focal,
            ParamClass::Group => self.lr_group,
            ParamClass::Disparity => self.lr_disparity,
        }
    }
}

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("initialization failed: {0}")]
    Init(#[from] InitError),
    #[error("loss {term} became non-finite at iteration {iter}")]
    NonFinite { term: &'static str, iter: usize },
    #[error("state does not match the groups: {0}")]
    Mismatch(String),
}

/// Loss values recorded before the update of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub stage: u8,
    pub l_p: f64,
    pub l_d: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_all: f64,
    pub grad_norm: f64,
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} stage={} l_p={:.9e} l_d={:.9e} l_c={:.9e} l_s={:.9e} l_all={:.9e} grad_norm={:.6e}",
            self.iter, self.stage, self.l_p, self.l_d, self.l_c, self.l_s, self.l_all, self.grad_norm
        )
    }
}

/// Loss values of a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub point: f64,
    pub depth: f64,
    pub cam: f64,
    pub smooth: f64,
}

impl Losses {
    pub fn weighted(&self, w: [f64; 4]) -> f64 {
        w[0] * self.point + w[1] * self.depth + w[2] * self.cam + w[3] * self.smooth
    }
}

/// Evaluates all four losses; when `grad` is given, it is overwritten with
/// the gradient of the `weights`-combination.
pub fn evaluate(
    state: &GlobalState,
    problem: &Problem,
    robust: Robust,
    weights: [f64; 4],
    mut grad: Option<&mut [f64]>,
) -> Losses {
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    let point = loss_point(state, problem, robust, grad.as_deref_mut().filter(|_| weights[0] > 0.0), weights[0]);
    let depth = loss_depth(state, problem, robust, grad.as_deref_mut().filter(|_| weights[1] > 0.0), weights[1]);
    let cam = loss_cam(state, problem, robust, grad.as_deref_mut().filter(|_| weights[2] > 0.0), weights[2]);
    let smooth = loss_smooth(state, robust, grad.filter(|_| weights[3] > 0.0), weights[3]);
    Losses {
        point,
        depth,
        cam,
        smooth,
    }
}

/// Fails on the first active term that is not finite.
fn check_finite(l: &Losses, weights: [f64; 4], iter: usize) -> Result<(), AlignError> {
    let terms = [("L_p", l.point), ("L_d", l.depth), ("L_c", l.cam), ("L_s", l.smooth)];
    for ((term, v), w) in terms.into_iter().zip(weights) {
        if w > 0.0 && !v.is_finite() {
            return Err(AlignError::NonFinite { term, iter });
        }
    }
    Ok(())
}

/// Result of [`optimize`].
#[derive(Debug, Clone)]
pub struct OptimizeOutput {
    pub state: GlobalState,
    pub trace: Vec<TraceRow>,
    pub ray_failures: usize,
}

/// Runs the staged optimization from `state`.
pub fn optimize_state(
    groups: &[WindowGroup],
    config: &AlignConfig,
    mut state: GlobalState,
) -> Result<OptimizeOutput, AlignError> {
    config.validate()?;
    if state.groups() != groups.len()
        || groups.iter().zip(&state.group_starts).any(|(g, s)| g.start != *s)
        || groups.iter().any(|g| g.shape() != (state.height, state.width) || g.start + g.len() > state.frames)
    {
        return Err(AlignError::Mismatch(format!(
            "{} groups for a state with {} groups over {} frames",
            groups.len(),
            state.groups(),
            state.frames
        )));
    }
    let problem = Problem::new(groups, state.frames, config.sigma_floor, config.d_min);
    let mut trace = Vec::with_capacity(config.iters_total);
    if config.iters_total == 0 {
        return Ok(OptimizeOutput {
            state,
            trace,
            ray_failures: problem.ray_failures,
        });
    }
    let alpha3 = if problem.has_rays() { config.alpha[2] } else { 0.0 };
    if alpha3 == 0.0 && config.alpha[2] > 0.0 {
        log::info!("no ray maps available; camera loss disabled");
    }
    let stage1 = [config.alpha[0], 0.0, 0.0, config.alpha[3]];
    let stage2 = [config.alpha[0], config.alpha[1], alpha3, config.alpha[3]];

    let n = state.params.len();
    let rates: Vec<f64> = (0..n)
        .map(|i| {
            if state.is_frozen(i) {
                0.0
            } else {
                config.rate(state.param_class(i))
            }
        })
        .collect();
    let mut grad = vec![0.0; n];
    let mut adam = Adam::new(n);
    let stage2_len = config.iters_total - config.align_start - 1;

    for iter in 0..config.iters_total {
        if iter == config.align_start {
            apply_closed_forms(&mut state, &problem);
            adam.reset();
            let l = evaluate(&state, &problem, config.robust, stage2, None);
            check_finite(&l, stage2, iter)?;
            let row = TraceRow {
                iter,
                stage: 0,
                l_p: l.point,
                l_d: l.depth,
                l_c: l.cam,
                l_s: l.smooth,
                l_all: l.weighted(stage2),
                grad_norm: 0.0,
            };
            log::debug!("{row}");
            trace.push(row);
            continue;
        }
        let (stage, weights, factor) = if iter < config.align_start {
            (1, stage1, schedule_factor(iter, config.align_start, config.warmup_iters, config.lr_min_factor))
        } else {
            let k = iter - config.align_start - 1;
            (2, stage2, schedule_factor(k, stage2_len, config.warmup_iters, config.lr_min_factor))
        };
        let l = evaluate(&state, &problem, config.robust, weights, Some(&mut grad));
        check_finite(&l, weights, iter)?;
        for (g, r) in grad.iter_mut().zip(&rates) {
            if *r == 0.0 {
                *g = 0.0;
            }
        }
        let row = TraceRow {
            iter,
            stage,
            l_p: l.point,
            l_d: l.depth,
            l_c: l.cam,
            l_s: l.smooth,
            l_all: l.weighted(weights),
            grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        };
        log::debug!("{row}");
        trace.push(row);
        adam.step(&mut state.params, &grad, |i| rates[i] * factor);
        state.normalize_quaternions();
    }
    Ok(OptimizeOutput {
        state,
        trace,
        ray_failures: problem.ray_failures,
    })
}

/// Runs the staged optimization from a warm start.
pub fn optimize(
    groups: &[WindowGroup],
    config: &AlignConfig,
    init: &InitState,
) -> Result<OptimizeOutput, AlignError> {
    let (height, width) = groups.first().map(|g| g.shape()).unwrap_or((0, 0));
    let window = groups.first().map(|g| g.len()).unwrap_or(0);
    let starts = groups.iter().map(|g| g.start).collect();
    let state = GlobalState::from_init(init, height, width, starts, window);
    optimize_state(groups, config, state)
}

/// Output of the full pipeline.
#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub init: InitState,
    pub state: GlobalState,
    pub trace: Vec<TraceRow>,
    pub ray_failures: usize,
}

impl AlignOutput {
    pub fn reconstruction(&self) -> Reconstruction {
        self.state.reconstruction()
    }
}

/// Initialization followed by the staged optimization.
pub fn align(
    groups: &[WindowGroup],
    index: &WindowIndex,
    config: &AlignConfig,
) -> Result<AlignOutput, AlignError> {
    config.validate()?;
    let init = initialize(groups, index, &config.init_config())?;
    let out = optimize(groups, config, &init)?;
    Ok(AlignOutput {
        init,
        state: out.state,
        trace: out.trace,
        ray_failures: out.ray_failures,
    })
}
