//! Adam with per-class step sizes and a cosine schedule.

/// First- and second-moment state for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    /// One update; `lr(i)` is the step size of parameter `i` (zero freezes it).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let rate = lr(i);
            if rate == 0.0 {
                continue;
            }
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Linear warm-up over `warmup` steps, then cosine decay to `min_factor` at
/// step `len - 1`.
pub fn schedule_factor(step: usize, len: usize, warmup: usize, min_factor: f64) -> f64 {
    let ramp = if step < warmup {
        (step + 1) as f64 / (warmup + 1) as f64
    } else {
        1.0
    };
    ramp * cosine_factor(step, len, min_factor)
}

/// Cosine decay from 1 to `min_factor` over `len` steps.
pub fn cosine_factor(step: usize, len: usize, min_factor: f64) -> f64 {
    if len <= 1 {
        return 1.0;
    }
    let t = step as f64 / (len - 1) as f64;
    min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}
