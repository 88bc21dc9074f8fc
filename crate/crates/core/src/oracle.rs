//! Synthetic ground truth and perturbed clip predictions.
//!
//! Scenes are a ground plane with spheres, rendered analytically for a
//! moving pinhole camera. Predictions re-express the truth in each clip's
//! first-frame camera and then apply the ambiguities the aligner must undo:
//! a similarity on point maps, an affine map on disparity and a similarity
//! on ray-map cameras, plus optional noise.

use crate::aligner::GlobalState;
use crate::geometry::{
    pixel_rays, raymap_from_camera, rotation_about_axis, DisparityMap, Grid, Intrinsics,
    PointMap, Pose, RayMap, Similarity, SIGMA_FLOOR,
};
use crate::windowing::{WindowGroup, WindowIndex};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("frame {frame} sees no geometry")]
    EmptyFrame { frame: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    /// Arc of ±30° around the scene center.
    Orbit,
    /// Forward motion along the viewing direction.
    Dolly,
    /// Forward motion with a lateral sine sway and yaw.
    Sinusoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub trajectory: Trajectory,
    pub static_spheres: usize,
    pub moving_spheres: usize,
    /// The focal length is drawn uniformly from this range.
    pub focal_range: (f64, f64),
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 30,
            height: 48,
            width: 64,
            trajectory: Trajectory::Orbit,
            static_spheres: 4,
            moving_spheres: 1,
            focal_range: (50.0, 70.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Sphere {
    center: Vector3<f64>,
    radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Motion {
    Linear(Vector3<f64>),
    Sine { amplitude: Vector3<f64>, period: f64 },
}

/// Ground-truth cameras and geometry for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub intrinsics: Vec<Intrinsics>,
    pub poses: Vec<Pose>,
    pub disparity: Vec<DisparityMap>,
    pub points: Vec<PointMap>,
    pub rays: Vec<RayMap>,
}

const CAMERA_HEIGHT: f64 = 1.0;
const PITCH_DEG: f64 = 48.0;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo.ln()..hi.ln()).exp()
    }
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
    if max_angle == 0.0 {
        return Matrix3::identity();
    }
    let axis: Vector3<f64> = Vector3::from_fn(|_, _| rng.sample(StandardNormal));
    rotation_about_axis(&axis, rng.random_range(-max_angle..max_angle))
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.sample(StandardNormal))
}

/// World-to-camera rotation looking from `eye` at `target`; world y points down.
fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - eye).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn camera_pose(kind: Trajectory, t: f64) -> Pose {
    let reach = CAMERA_HEIGHT / PITCH_DEG.to_radians().tan();
    let (eye, target) = match kind {
        Trajectory::Static => (Vector3::new(0.0, -CAMERA_HEIGHT, -reach), Vector3::zeros()),
        Trajectory::Orbit => {
            let a = (-30.0 + 60.0 * t).to_radians();
            (
                Vector3::new(reach * a.sin(), -CAMERA_HEIGHT, -reach * a.cos()),
                Vector3::zeros(),
            )
        }
        Trajectory::Dolly => {
            let z = -reach - 0.4 + 0.5 * t;
            (
                Vector3::new(0.0, -CAMERA_HEIGHT, z),
                Vector3::new(0.0, 0.0, z + reach),
            )
        }
        Trajectory::Sinusoid => {
            let phase = 2.0 * std::f64::consts::PI * t;
            let z = -reach - 0.2 + 0.3 * t;
            let eye = Vector3::new(0.3 * phase.sin(), -CAMERA_HEIGHT, z);
            (eye, Vector3::new(0.15 * phase.sin(), 0.0, z + reach))
        }
    };
    Pose::new(look_at(&eye, &target), eye)
}

/// Smallest positive ray parameter hitting the ground plane `y = 0` or a sphere.
fn intersect(o: &Vector3<f64>, d: &Vector3<f64>, spheres: &[Sphere]) -> Option<f64> {
    let mut best = f64::INFINITY;
    if d.y > 0.0 && o.y < 0.0 {
        best = -o.y / d.y;
    }
    for s in spheres {
        let oc = o - s.center;
        let a = d.norm_squared();
        let b = oc.dot(d);
        let c = oc.norm_squared() - s.radius * s.radius;
        let disc = b * b - a * c;
        if disc < 0.0 {
            continue;
        }
        let root = disc.sqrt();
        for t in [(-b - root) / a, (-b + root) / a] {
            if t > 1e-9 && t < best {
                best = t;
                break;
            }
        }
    }
    best.is_finite().then_some(best)
}

/// Renders the ground-truth scene.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, OracleError> {
    if spec.frames == 0 || spec.height == 0 || spec.width == 0 {
        return Err(OracleError::InvalidSpec("frames and image size must be positive".into()));
    }
    let (flo, fhi) = spec.focal_range;
    if !(flo > 0.0 && fhi >= flo) {
        return Err(OracleError::InvalidSpec(format!("bad focal range {:?}", spec.focal_range)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let focal = uniform(&mut rng, flo, fhi);
    let place = |rng: &mut ChaCha8Rng, rmin: f64, rmax: f64| {
        let radius = rng.random_range(rmin..rmax);
        Sphere {
            center: Vector3::new(rng.random_range(-0.5..0.5), -radius, rng.random_range(-0.3..0.6)),
            radius,
        }
    };
    let statics: Vec<Sphere> = (0..spec.static_spheres).map(|_| place(&mut rng, 0.08, 0.2)).collect();
    let movers: Vec<(Sphere, Motion)> = (0..spec.moving_spheres)
        .map(|_| {
            let s = place(&mut rng, 0.06, 0.12);
            let motion = if rng.random_bool(0.5) {
                Motion::Linear(Vector3::new(rng.random_range(-0.3..0.3), 0.0, rng.random_range(-0.3..0.3)))
            } else {
                Motion::Sine {
                    amplitude: Vector3::new(rng.random_range(-0.2..0.2), 0.0, rng.random_range(-0.2..0.2)),
                    period: rng.random_range(0.5..1.5),
                }
            };
            (s, motion)
        })
        .collect();

    let k = Intrinsics::centered(focal, spec.width, spec.height);
    let cam_rays = pixel_rays(&k, spec.height, spec.width)
        .map_err(|e| OracleError::InvalidSpec(e.to_string()))?;
    let mut scene = Scene {
        spec: spec.clone(),
        intrinsics: Vec::with_capacity(spec.frames),
        poses: Vec::with_capacity(spec.frames),
        disparity: Vec::with_capacity(spec.frames),
        points: Vec::with_capacity(spec.frames),
        rays: Vec::with_capacity(spec.frames),
    };
    for i in 0..spec.frames {
        let t = if spec.frames > 1 { i as f64 / (spec.frames - 1) as f64 } else { 0.0 };
        let pose = camera_pose(spec.trajectory, t);
        let mut spheres = statics.clone();
        for (s, m) in &movers {
            let offset = match m {
                Motion::Linear(v) => v * t,
                Motion::Sine { amplitude, period } => {
                    amplitude * (2.0 * std::f64::consts::PI * t / period).sin()
                }
            };
            spheres.push(Sphere {
                center: s.center + offset,
                radius: s.radius,
            });
        }
        let rt = pose.rotation.transpose();
        let mut disp = Vec::with_capacity(cam_rays.len());
        let mut pts = Vec::with_capacity(cam_rays.len());
        for r in cam_rays.as_slice() {
            let d = rt * r;
            match intersect(&pose.center, &d, &spheres) {
                Some(depth) => {
                    disp.push(1.0 / depth);
                    pts.push(pose.center + d * depth);
                }
                None => {
                    disp.push(0.0);
                    pts.push(Vector3::repeat(f64::NAN));
                }
            }
        }
        if disp.iter().all(|d| *d == 0.0) {
            return Err(OracleError::EmptyFrame { frame: i });
        }
        let rays = raymap_from_camera(&k, &pose, spec.height, spec.width)
            .map_err(|e| OracleError::InvalidSpec(e.to_string()))?;
        scene.intrinsics.push(k);
        scene.poses.push(pose);
        scene.disparity.push(Grid::from_vec(spec.height, spec.width, disp));
        scene.points.push(Grid::from_vec(spec.height, spec.width, pts));
        scene.rays.push(rays);
    }
    Ok(scene)
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    /// Diagonal of the bounding box of all finite surface points and camera
    /// centers.
    pub fn diameter(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        let finite = self
            .points
            .iter()
            .flat_map(|p| p.as_slice())
            .filter(|x| x.iter().all(|c| c.is_finite()))
            .chain(self.poses.iter().map(|p| &p.center));
        for x in finite {
            lo = lo.inf(x);
            hi = hi.sup(x);
        }
        (hi - lo).norm()
    }
}

/// Ambiguities and noise applied to each clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSpec {
    /// Group similarities (points and ray cameras): rotation angle bound,
    /// log-uniform scale range and per-axis translation bound.
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_translation: f64,
    /// Disparity affine `D_pred = (D - β) / λ`.
    pub disparity_scale_range: (f64, f64),
    pub disparity_shift_range: (f64, f64),
    /// Per-frame jitter of the ray-map cameras.
    pub jitter_rotation_deg: f64,
    pub jitter_translation: f64,
    /// Relative Gaussian noise levels.
    pub point_noise: f64,
    pub disparity_noise: f64,
    pub ray_noise: f64,
    /// Emitted uncertainty is `σ_floor + sigma_gain · (point noise std)`.
    pub sigma_gain: f64,
    /// Omit ray maps from the predictions.
    pub drop_rays: bool,
    pub seed: u64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            scale_range: (0.5, 2.0),
            max_translation: 1.0,
            disparity_scale_range: (0.5, 2.0),
            disparity_shift_range: (-0.2, 0.2),
            jitter_rotation_deg: 0.0,
            jitter_translation: 0.0,
            point_noise: 0.0,
            disparity_noise: 0.0,
            ray_noise: 0.0,
            sigma_gain: 100.0,
            drop_rays: false,
            seed: 0,
        }
    }
}

impl PerturbSpec {
    /// No ambiguity and no noise.
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            max_translation: 0.0,
            disparity_scale_range: (1.0, 1.0),
            disparity_shift_range: (0.0, 0.0),
            ..Self::default()
        }
    }

    /// Default ambiguities with the same relative noise on every modality.
    pub fn noisy(level: f64, seed: u64) -> Self {
        Self {
            point_noise: level,
            disparity_noise: level,
            ray_noise: level,
            seed,
            ..Self::default()
        }
    }
}

/// Injected ambiguity of one clip, in scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupTruth {
    pub start: usize,
    /// Applied to clip-relative points: `X^{i,g} = S(X^i_clip)`.
    pub point_similarity: Similarity,
    /// `(λ, β)` with `D_pred = (D - β) / λ`.
    pub disparity_affine: (f64, f64),
    /// Applied to clip-relative ray cameras.
    pub ray_similarity: Similarity,
}

fn group_rng(seed: u64, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    rng
}

fn sample_similarity(rng: &mut ChaCha8Rng, spec: &PerturbSpec) -> Similarity {
    let rotation = random_rotation(rng, spec.max_rotation_deg.to_radians());
    let scale = log_uniform(rng, spec.scale_range.0, spec.scale_range.1);
    let t = spec.max_translation;
    let translation = Vector3::new(uniform(rng, -t, t), uniform(rng, -t, t), uniform(rng, -t, t));
    Similarity::new(scale, rotation, translation)
}

/// Draws the ambiguity of the clip starting at `start`. Depends only on
/// `(spec.seed, start)`.
pub fn sample_group_truth(spec: &PerturbSpec, start: usize) -> GroupTruth {
    let mut rng = group_rng(spec.seed, start);
    let point_similarity = sample_similarity(&mut rng, spec);
    let scale = log_uniform(&mut rng, spec.disparity_scale_range.0, spec.disparity_scale_range.1);
    let shift = uniform(&mut rng, spec.disparity_shift_range.0, spec.disparity_shift_range.1);
    let ray_similarity = sample_similarity(&mut rng, spec);
    GroupTruth {
        start,
        point_similarity,
        disparity_affine: (scale, shift),
        ray_similarity,
    }
}

/// Simulated clip predictions for every window of `index`, with sampled
/// ambiguities.
pub fn make_predictions(
    scene: &Scene,
    index: &WindowIndex,
    spec: &PerturbSpec,
) -> (Vec<WindowGroup>, Vec<GroupTruth>) {
    let truths: Vec<GroupTruth> = index.starts.iter().map(|&s| sample_group_truth(spec, s)).collect();
    let groups = truths
        .iter()
        .map(|t| predict_group(scene, index.window, t, spec))
        .collect();
    (groups, truths)
}

/// Predictions of the clip described by `truth`, with noise levels and
/// jitter from `spec`.
pub fn predict_group(scene: &Scene, window: usize, truth: &GroupTruth, spec: &PerturbSpec) -> WindowGroup {
    // Noise draws come after the group-level draws of the same stream.
    let mut rng = group_rng(spec.seed, truth.start);
    advance_like_truth(&mut rng, spec);

    let k0 = truth.start;
    let to_clip = Similarity::world_to_camera(&scene.poses[k0]);
    let (height, width) = scene.disparity[0].shape();
    let s = &truth.point_similarity;
    let (dl, db) = truth.disparity_affine;
    let mut group = WindowGroup {
        start: k0,
        points: Vec::with_capacity(window),
        disparity: Vec::with_capacity(window),
        uncertainty: Vec::with_capacity(window),
        rays: (!spec.drop_rays).then(|| Vec::with_capacity(window)),
    };
    let ref_depth = median_depth(&scene.disparity[k0]);
    for i in k0..k0 + window {
        let gt_disp = scene.disparity[i].as_slice();
        let mut pts = Vec::with_capacity(gt_disp.len());
        let mut sig = Vec::with_capacity(gt_disp.len());
        let mut disp = Vec::with_capacity(gt_disp.len());
        for (idx, x) in scene.points[i].as_slice().iter().enumerate() {
            let depth = 1.0 / gt_disp[idx];
            let mut p = s.apply(&to_clip.apply(x));
            let mut d = (gt_disp[idx] - db) / dl;
            let mut sigma = SIGMA_FLOOR;
            if spec.point_noise > 0.0 {
                let std = spec.point_noise * depth * s.scale;
                p += gaussian3(&mut rng) * std;
                sigma += spec.sigma_gain * std;
            }
            if spec.disparity_noise > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                d *= 1.0 + spec.disparity_noise * n;
            }
            pts.push(p);
            disp.push(d);
            sig.push(sigma);
        }
        group.points.push(Grid::from_vec(height, width, pts));
        group.disparity.push(Grid::from_vec(height, width, disp));
        group.uncertainty.push(Grid::from_vec(height, width, sig));

        if let Some(rays) = group.rays.as_mut() {
            let rel = to_clip.transform_pose(&scene.poses[i]);
            let mut pose = truth.ray_similarity.transform_pose(&rel);
            if spec.jitter_rotation_deg > 0.0 || spec.jitter_translation > 0.0 {
                let dr = random_rotation(&mut rng, spec.jitter_rotation_deg.to_radians());
                let dc = gaussian3(&mut rng) * spec.jitter_translation * truth.ray_similarity.scale;
                pose = Pose::new(dr * pose.rotation, pose.center + dc);
            }
            let mut map = raymap_from_camera(&scene.intrinsics[i], &pose, height, width)
                .expect("scene intrinsics are valid");
            if spec.ray_noise > 0.0 {
                let rho = truth.ray_similarity.scale * ref_depth;
                let (dirs, moms) = (map.directions.as_mut_slice(), map.moments.as_mut_slice());
                for (d, m) in dirs.iter_mut().zip(moms.iter_mut()) {
                    let n = d.norm();
                    *d += gaussian3(&mut rng) * spec.ray_noise * n;
                    *m += gaussian3(&mut rng) * spec.ray_noise * n * rho;
                }
            }
            rays.push(map);
        }
    }
    group
}

fn advance_like_truth(rng: &mut ChaCha8Rng, spec: &PerturbSpec) {
    // Replays the draws of `sample_group_truth` so noise never reuses them.
    let _ = sample_similarity(rng, spec);
    let _ = log_uniform(rng, spec.disparity_scale_range.0, spec.disparity_scale_range.1);
    let _ = uniform(rng, spec.disparity_shift_range.0, spec.disparity_shift_range.1);
    let _ = sample_similarity(rng, spec);
}

fn median_depth(disparity: &DisparityMap) -> f64 {
    let mut depths: Vec<f64> = disparity
        .as_slice()
        .iter()
        .filter(|d| **d > 0.0)
        .map(|d| 1.0 / d)
        .collect();
    if depths.is_empty() {
        return 1.0;
    }
    let mid = depths.len() / 2;
    *depths.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// Similarity from scene coordinates into the aligner's gauge: frame 0's
/// camera at the point scale of the first group.
pub fn gauge(scene: &Scene, first: &GroupTruth) -> Similarity {
    let w0 = Similarity::world_to_camera(&scene.poses[0]);
    Similarity::new(first.point_similarity.scale, Matrix3::identity(), Vector3::zeros()).compose(&w0)
}

/// A state that explains noiseless predictions exactly, built from the
/// injected ambiguities.
pub fn witness_state(scene: &Scene, truths: &[GroupTruth], window: usize) -> GlobalState {
    let (height, width) = scene.disparity[0].shape();
    let starts = truths.iter().map(|t| t.start).collect();
    let mut state = GlobalState::identity(scene.frames(), height, width, starts, window);
    let Some(first) = truths.first() else {
        return state;
    };
    let gauge = gauge(scene, first);
    for i in 0..scene.frames() {
        state.set_focal(i, scene.intrinsics[i].fx);
        state.set_pose(i, &gauge.transform_pose(&scene.poses[i]));
        state.set_disparity(i, &scene.disparity[i].map(|d| d / gauge.scale));
    }
    for (g, t) in truths.iter().enumerate() {
        let to_clip = Similarity::world_to_camera(&scene.poses[t.start]);
        let point = gauge
            .compose(&to_clip.inverse())
            .compose(&t.point_similarity.inverse());
        state.set_point_similarity(g, &point);
        let (l, b) = t.disparity_affine;
        state.set_depth_affine(g, l / gauge.scale, b / gauge.scale);
        let cam = gauge
            .compose(&to_clip.inverse())
            .compose(&t.ray_similarity.inverse());
        state.set_cam_alignment(g, &cam.rotation.transpose(), cam.scale, &cam.translation);
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aligner::{evaluate, Problem, Robust};
    use crate::geometry::{point_map_from_depth, rot_y};
    use crate::init::chain_groups;
    use crate::ray_solver::camera_from_raymap;
    use crate::windowing::build_window_index;

    fn small_spec(trajectory: Trajectory, seed: u64) -> SceneSpec {
        SceneSpec {
            frames: 8,
            height: 24,
            width: 32,
            trajectory,
            focal_range: (25.0, 35.0),
            seed,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn scenes_are_self_consistent() {
        for (n, kind) in [Trajectory::Orbit, Trajectory::Dolly, Trajectory::Sinusoid, Trajectory::Static]
            .into_iter()
            .enumerate()
        {
            let scene = generate_scene(&small_spec(kind, n as u64)).unwrap();
            for i in 0..scene.frames() {
                assert!(scene.disparity[i].as_slice().iter().all(|d| *d > 0.3 && *d < 3.0));
                let x = point_map_from_depth(&scene.disparity[i], &scene.intrinsics[i], &scene.poses[i]).unwrap();
                for (a, b) in x.as_slice().iter().zip(scene.points[i].as_slice()) {
                    assert!((a - b).norm() < 1e-9);
                }
                let sol = camera_from_raymap(&scene.rays[i]).unwrap();
                assert!((sol.center - scene.poses[i].center).norm() < 1e-6);
                assert!((sol.rotation - scene.poses[i].rotation).norm() < 1e-6);
                assert!((sol.intrinsics.fx - scene.intrinsics[i].fx).abs() < 1e-6 * scene.intrinsics[i].fx);
            }
        }
    }

    #[test]
    fn static_scene_and_camera_repeat_frames() {
        let spec = SceneSpec {
            moving_spheres: 0,
            ..small_spec(Trajectory::Static, 3)
        };
        let scene = generate_scene(&spec).unwrap();
        for i in 1..scene.frames() {
            assert_eq!(scene.points[i], scene.points[0]);
        }
    }

    #[test]
    fn moving_objects_change_the_geometry() {
        let spec = SceneSpec {
            moving_spheres: 2,
            ..small_spec(Trajectory::Static, 5)
        };
        let scene = generate_scene(&spec).unwrap();
        assert_ne!(scene.points[0], scene.points[scene.frames() - 1]);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(Trajectory::Orbit, 11);
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let index = build_window_index(8, 4, 2).unwrap();
        let scene = generate_scene(&spec).unwrap();
        let p = PerturbSpec::noisy(0.01, 2);
        assert_eq!(make_predictions(&scene, &index, &p).0, make_predictions(&scene, &index, &p).0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let spec = SceneSpec {
            frames: 0,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&spec), Err(OracleError::InvalidSpec(_))));
    }

    #[test]
    fn identity_perturbation_is_exact() {
        let scene = generate_scene(&small_spec(Trajectory::Orbit, 1)).unwrap();
        let index = build_window_index(8, 4, 2).unwrap();
        let (groups, _) = make_predictions(&scene, &index, &PerturbSpec::identity());
        for g in &groups {
            let to_clip = Similarity::world_to_camera(&scene.poses[g.start]);
            for (l, i) in g.frames().enumerate() {
                let expect = scene.points[i].map(|x| to_clip.apply(x));
                assert_eq!(g.points[l], expect);
                assert_eq!(g.disparity[l], scene.disparity[i]);
                let rel = to_clip.transform_pose(&scene.poses[i]);
                let rays = raymap_from_camera(&scene.intrinsics[i], &rel, 24, 32).unwrap();
                assert_eq!(g.rays.as_ref().unwrap()[l], rays);
            }
        }
    }

    #[test]
    fn stride_subsets_share_group_predictions() {
        let scene = generate_scene(&small_spec(Trajectory::Dolly, 4)).unwrap();
        let p = PerturbSpec::noisy(0.01, 9);
        let (fine, _) = make_predictions(&scene, &build_window_index(8, 4, 1).unwrap(), &p);
        let (coarse, _) = make_predictions(&scene, &build_window_index(8, 4, 2).unwrap(), &p);
        for g in &coarse {
            assert_eq!(Some(g), fine.iter().find(|f| f.start == g.start));
        }
    }

    #[test]
    fn witness_explains_noiseless_predictions() {
        for seed in 0..3 {
            let scene = generate_scene(&small_spec(Trajectory::Orbit, seed)).unwrap();
            let index = build_window_index(8, 4, 2).unwrap();
            let spec = PerturbSpec { seed, ..PerturbSpec::default() };
            let (groups, truths) = make_predictions(&scene, &index, &spec);
            let state = witness_state(&scene, &truths, 4);
            assert!((state.pose(0).rotation - Matrix3::identity()).norm() < 1e-12);
            assert!(state.pose(0).center.norm() < 1e-12);
            assert!((state.point_similarity(0).scale - 1.0).abs() < 1e-12);
            let problem = Problem::new(&groups, 8, SIGMA_FLOOR, 1e-4);
            let l = evaluate(&state, &problem, Robust::L1, [1.0; 4], None);
            let pixels = (8 * 24 * 32) as f64;
            assert!(l.point / pixels < 1e-9 && l.depth / pixels < 1e-12, "{l:?}");
            assert!(l.cam < 1e-5 && l.smooth > 0.0, "{l:?}");
        }
    }

    #[test]
    fn chaining_recovers_a_known_group_similarity() {
        let scene = generate_scene(&small_spec(Trajectory::Orbit, 2)).unwrap();
        let index = build_window_index(8, 4, 2).unwrap();
        let spec = PerturbSpec::identity();
        let known = Similarity::new(1.7, rot_y(20f64.to_radians()), Vector3::new(0.3, 0.0, -0.1));
        let truths: Vec<GroupTruth> = index
            .starts
            .iter()
            .map(|&start| GroupTruth {
                point_similarity: if start == 2 { known } else { Similarity::identity() },
                ..sample_group_truth(&spec, start)
            })
            .collect();
        let groups: Vec<WindowGroup> = truths.iter().map(|t| predict_group(&scene, 4, t, &spec)).collect();
        let sims = chain_groups(&groups, &index, 4096).unwrap();
        // Clip-relative frames differ by the relative camera motion.
        let w0 = Similarity::world_to_camera(&scene.poses[0]);
        let w2 = Similarity::world_to_camera(&scene.poses[2]);
        let expect = w0.compose(&w2.inverse()).compose(&known.inverse());
        assert!((sims[1].scale - expect.scale).abs() < 1e-6);
        assert!((sims[1].rotation - expect.rotation).norm() < 1e-6);
        assert!((sims[1].translation - expect.translation).norm() < 1e-6);
    }

    #[test]
    fn point_noise_matches_the_configured_level() {
        let spec = SceneSpec {
            frames: 4,
            height: 48,
            width: 64,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let index = build_window_index(4, 4, 1).unwrap();
        let level = 0.02;
        let noisy = PerturbSpec {
            point_noise: level,
            ..PerturbSpec::identity()
        };
        let (groups, _) = make_predictions(&scene, &index, &noisy);
        let (clean, _) = make_predictions(&scene, &index, &PerturbSpec::identity());
        let (mut sum, mut count) = (0.0, 0usize);
        for l in 0..4 {
            let disp = scene.disparity[l].as_slice();
            for (idx, (a, b)) in groups[0].points[l].as_slice().iter().zip(clean[0].points[l].as_slice()).enumerate() {
                let std = level / disp[idx];
                for k in 0..3 {
                    sum += ((a[k] - b[k]) / std).abs();
                    count += 1;
                }
                assert!((groups[0].uncertainty[l].as_slice()[idx] - SIGMA_FLOOR - noisy.sigma_gain * std).abs() < 1e-12);
            }
        }
        assert!(count >= 10_000);
        let mean_abs = sum / count as f64;
        let expect = (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean_abs / expect - 1.0).abs() < 0.05, "{mean_abs}");
    }

    #[test]
    fn dropped_rays() {
        let scene = generate_scene(&small_spec(Trajectory::Orbit, 0)).unwrap();
        let index = build_window_index(8, 4, 4).unwrap();
        let spec = PerturbSpec {
            drop_rays: true,
            ..PerturbSpec::default()
        };
        assert!(make_predictions(&scene, &index, &spec).0.iter().all(|g| g.rays.is_none()));
    }
}
