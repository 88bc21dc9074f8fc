use crate::geometry::{
    matrix_from_quaternion, quaternion_from_matrix, DisparityMap, Grid, Intrinsics, Pose,
    Similarity,
};
use crate::init::InitState;
use nalgebra::{Matrix3, Vector3};

pub(crate) const FRAME_STRIDE: usize = 8;
pub(crate) const GROUP_STRIDE: usize = 18;

// Offsets inside a frame block.
pub(crate) const F_LOG_FOCAL: usize = 0;
pub(crate) const F_QUAT: usize = 1;
pub(crate) const F_CENTER: usize = 5;

// Offsets inside a group block.
pub(crate) const G_POINT_LOG_SCALE: usize = 0;
pub(crate) const G_POINT_QUAT: usize = 1;
pub(crate) const G_POINT_SHIFT: usize = 5;
pub(crate) const G_DEPTH_LOG_SCALE: usize = 8;
pub(crate) const G_DEPTH_SHIFT: usize = 9;
pub(crate) const G_CAM_LOG_SCALE: usize = 10;
pub(crate) const G_CAM_QUAT: usize = 11;
pub(crate) const G_CAM_SHIFT: usize = 15;

/// Optimizer class of a parameter; each class has its own step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Pose,
    Focal,
    Group,
    Disparity,
}

/// All optimization variables, stored as one flat vector.
///
/// Per frame: log focal, world-to-camera rotation (quaternion `[w,x,y,z]`),
/// camera center, and a log-disparity field. Per group: point-map similarity
/// `(log λ_p, R_p, β_p)`, disparity affine `(log λ_d, β_d)` and ray-camera
/// alignment `(log λ_c, R_c, β_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub group_starts: Vec<usize>,
    pub window: usize,
    pub params: Vec<f64>,
}

fn put_quat(p: &mut [f64], at: usize, r: &Matrix3<f64>) {
    p[at..at + 4].copy_from_slice(&quaternion_from_matrix(r));
}

fn put_vec(p: &mut [f64], at: usize, v: &Vector3<f64>) {
    p[at..at + 3].copy_from_slice(v.as_slice());
}

impl GlobalState {
    /// A state with identity cameras, unit disparity and identity group
    /// transforms.
    pub fn identity(
        frames: usize,
        height: usize,
        width: usize,
        group_starts: Vec<usize>,
        window: usize,
    ) -> Self {
        let groups = group_starts.len();
        let len = frames * FRAME_STRIDE + groups * GROUP_STRIDE + frames * height * width;
        let mut state = Self {
            height,
            width,
            frames,
            group_starts,
            window,
            params: vec![0.0; len],
        };
        for i in 0..frames {
            let o = state.frame_offset(i);
            state.params[o + F_QUAT] = 1.0;
        }
        for g in 0..groups {
            let o = state.group_offset(g);
            state.params[o + G_POINT_QUAT] = 1.0;
            state.params[o + G_CAM_QUAT] = 1.0;
        }
        state
    }

    pub fn from_init(init: &InitState, height: usize, width: usize, group_starts: Vec<usize>, window: usize) -> Self {
        let frames = init.poses.len();
        let mut s = Self::identity(frames, height, width, group_starts, window);
        for i in 0..frames {
            s.set_focal(i, init.focals[i]);
            s.set_pose(i, &init.poses[i]);
            s.set_disparity(i, &init.disparity[i]);
        }
        for (g, sim) in init.point_similarities.iter().enumerate() {
            s.set_point_similarity(g, sim);
        }
        s
    }

    pub fn groups(&self) -> usize {
        self.group_starts.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub(crate) fn frame_offset(&self, i: usize) -> usize {
        i * FRAME_STRIDE
    }

    #[inline]
    pub(crate) fn group_offset(&self, g: usize) -> usize {
        self.frames * FRAME_STRIDE + g * GROUP_STRIDE
    }

    #[inline]
    pub(crate) fn disparity_offset(&self, i: usize) -> usize {
        self.frames * FRAME_STRIDE + self.groups() * GROUP_STRIDE + i * self.pixels()
    }

    /// Indices of all quaternion blocks.
    pub(crate) fn quaternion_offsets(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.frames)
            .map(|i| self.frame_offset(i) + F_QUAT)
            .collect();
        for g in 0..self.groups() {
            out.push(self.group_offset(g) + G_POINT_QUAT);
            out.push(self.group_offset(g) + G_CAM_QUAT);
        }
        out
    }

    pub fn param_class(&self, idx: usize) -> ParamClass {
        let frame_end = self.frames * FRAME_STRIDE;
        let group_end = frame_end + self.groups() * GROUP_STRIDE;
        if idx < frame_end {
            if idx % FRAME_STRIDE == F_LOG_FOCAL {
                ParamClass::Focal
            } else {
                ParamClass::Pose
            }
        } else if idx < group_end {
            ParamClass::Group
        } else {
            ParamClass::Disparity
        }
    }

    /// Parameters pinned by the gauge: frame 0's pose and group 0's point scale.
    pub fn is_frozen(&self, idx: usize) -> bool {
        let f0 = self.frame_offset(0);
        (self.frames > 0 && idx > f0 + F_LOG_FOCAL && idx < f0 + FRAME_STRIDE)
            || (self.groups() > 0 && idx == self.group_offset(0) + G_POINT_LOG_SCALE)
    }

    pub(crate) fn quat(&self, at: usize) -> [f64; 4] {
        [
            self.params[at],
            self.params[at + 1],
            self.params[at + 2],
            self.params[at + 3],
        ]
    }

    pub(crate) fn vec3(&self, at: usize) -> Vector3<f64> {
        Vector3::new(self.params[at], self.params[at + 1], self.params[at + 2])
    }

    pub fn focal(&self, i: usize) -> f64 {
        self.params[self.frame_offset(i) + F_LOG_FOCAL].exp()
    }

    pub fn set_focal(&mut self, i: usize, f: f64) {
        let o = self.frame_offset(i);
        self.params[o + F_LOG_FOCAL] = f.ln();
    }

    pub fn intrinsics(&self, i: usize) -> Intrinsics {
        Intrinsics::centered(self.focal(i), self.width, self.height)
    }

    pub fn rotation(&self, i: usize) -> Matrix3<f64> {
        matrix_from_quaternion(&self.quat(self.frame_offset(i) + F_QUAT))
    }

    pub fn center(&self, i: usize) -> Vector3<f64> {
        self.vec3(self.frame_offset(i) + F_CENTER)
    }

    pub fn pose(&self, i: usize) -> Pose {
        Pose::new(self.rotation(i), self.center(i))
    }

    pub fn set_pose(&mut self, i: usize, pose: &Pose) {
        let o = self.frame_offset(i);
        put_quat(&mut self.params, o + F_QUAT, &pose.rotation);
        put_vec(&mut self.params, o + F_CENTER, &pose.center);
    }

    pub fn log_disparity(&self, i: usize) -> &[f64] {
        let o = self.disparity_offset(i);
        &self.params[o..o + self.pixels()]
    }

    pub fn disparity(&self, i: usize) -> DisparityMap {
        Grid::from_vec(
            self.height,
            self.width,
            self.log_disparity(i).iter().map(|l| l.exp()).collect(),
        )
    }

    /// Stores `ln(max(d, 1e-12))` for every pixel.
    pub fn set_disparity(&mut self, i: usize, d: &DisparityMap) {
        let (o, n) = (self.disparity_offset(i), self.pixels());
        for (dst, src) in self.params[o..o + n]
            .iter_mut()
            .zip(d.as_slice())
        {
            *dst = src.max(1e-12).ln();
        }
    }

    pub fn point_similarity(&self, g: usize) -> Similarity {
        let o = self.group_offset(g);
        Similarity::new(
            self.params[o + G_POINT_LOG_SCALE].exp(),
            matrix_from_quaternion(&self.quat(o + G_POINT_QUAT)),
            self.vec3(o + G_POINT_SHIFT),
        )
    }

    pub fn set_point_similarity(&mut self, g: usize, sim: &Similarity) {
        let o = self.group_offset(g);
        self.params[o + G_POINT_LOG_SCALE] = sim.scale.ln();
        put_quat(&mut self.params, o + G_POINT_QUAT, &sim.rotation);
        put_vec(&mut self.params, o + G_POINT_SHIFT, &sim.translation);
    }

    /// `(λ_d, β_d)`.
    pub fn depth_affine(&self, g: usize) -> (f64, f64) {
        let o = self.group_offset(g);
        (
            self.params[o + G_DEPTH_LOG_SCALE].exp(),
            self.params[o + G_DEPTH_SHIFT],
        )
    }

    pub fn set_depth_affine(&mut self, g: usize, scale: f64, shift: f64) {
        let o = self.group_offset(g);
        self.params[o + G_DEPTH_LOG_SCALE] = scale.ln();
        self.params[o + G_DEPTH_SHIFT] = shift;
    }

    /// `(R_c, λ_c, β_c)`: the aligned ray camera of frame i in group g has
    /// rotation `R_c^{i,g} R_c` and center `λ_c R_cᵀ o_c^{i,g} + β_c`.
    pub fn cam_alignment(&self, g: usize) -> (Matrix3<f64>, f64, Vector3<f64>) {
        let o = self.group_offset(g);
        (
            matrix_from_quaternion(&self.quat(o + G_CAM_QUAT)),
            self.params[o + G_CAM_LOG_SCALE].exp(),
            self.vec3(o + G_CAM_SHIFT),
        )
    }

    pub fn set_cam_alignment(&mut self, g: usize, rotation: &Matrix3<f64>, scale: f64, shift: &Vector3<f64>) {
        let o = self.group_offset(g);
        self.params[o + G_CAM_LOG_SCALE] = scale.ln();
        put_quat(&mut self.params, o + G_CAM_QUAT, rotation);
        put_vec(&mut self.params, o + G_CAM_SHIFT, shift);
    }

    /// Rescales every quaternion block to unit norm.
    pub fn normalize_quaternions(&mut self) {
        for at in self.quaternion_offsets() {
            let q = &mut self.params[at..at + 4];
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|c| *c /= n);
            }
        }
    }

    pub fn reconstruction(&self) -> Reconstruction {
        Reconstruction {
            height: self.height,
            width: self.width,
            intrinsics: (0..self.frames).map(|i| self.intrinsics(i)).collect(),
            poses: (0..self.frames).map(|i| self.pose(i)).collect(),
            disparity: (0..self.frames).map(|i| self.disparity(i)).collect(),
        }
    }
}

/// Per-frame cameras and disparity: the deliverable of an alignment run.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub height: usize,
    pub width: usize,
    pub intrinsics: Vec<Intrinsics>,
    pub poses: Vec<Pose>,
    pub disparity: Vec<DisparityMap>,
}

impl Reconstruction {
    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    /// World-space point of pixel `idx` in frame `i`, if its disparity is usable.
    pub fn point(&self, i: usize, idx: usize, d_min: f64) -> Option<Vector3<f64>> {
        let d = self.disparity[i].as_slice()[idx];
        if !(d >= d_min) || !d.is_finite() {
            return None;
        }
        let (v, u) = self.disparity[i].coords(idx);
        let ray = self.intrinsics[i].unproject(u as f64, v as f64);
        Some(self.poses[i].camera_to_world(&(ray / d)))
    }
}
