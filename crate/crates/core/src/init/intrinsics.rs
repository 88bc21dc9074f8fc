use super::InitError;
use crate::geometry::{image_center, PointMap};

const WEISZFELD_ITERATIONS: usize = 10;

/// Focal length minimizing `Σ_uv |(u - cx, v - cy) - f (X/Z, Y/Z)|` for a
/// point map expressed in its own camera frame, with the principal point at
/// the image center.
///
/// Starts from the closed-form least-squares focal and runs iteratively
/// reweighted (Weiszfeld) updates for the unsquared residual norm.
pub fn init_intrinsics(points: &PointMap) -> Result<f64, InitError> {
    let (cx, cy) = image_center(points.width(), points.height());
    let mut obs = Vec::with_capacity(points.len());
    for (idx, x) in points.as_slice().iter().enumerate() {
        if !(x.z > 0.0) || !x.iter().all(|c| c.is_finite()) {
            continue;
        }
        let (v, u) = points.coords(idx);
        obs.push(([u as f64 - cx, v as f64 - cy], [x.x / x.z, x.y / x.z]));
    }
    if obs.is_empty() {
        return Err(InitError::BehindCamera);
    }
    if obs.len() < 10 {
        return Err(InitError::InsufficientPoints {
            got: obs.len(),
            need: 10,
        });
    }

    let weighted_fit = |weights: &dyn Fn(&([f64; 2], [f64; 2])) -> f64| -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for o in &obs {
            let w = weights(o);
            num += w * (o.0[0] * o.1[0] + o.0[1] * o.1[1]);
            den += w * (o.1[0] * o.1[0] + o.1[1] * o.1[1]);
        }
        num / den
    };
    let mut focal = weighted_fit(&|_| 1.0);
    if !focal.is_finite() {
        return Err(InitError::DegenerateCorrespondence(
            "all points project onto the principal point".into(),
        ));
    }
    for _ in 0..WEISZFELD_ITERATIONS {
        let f = focal;
        let next = weighted_fit(&|(a, b)| {
            let r = ((a[0] - f * b[0]).powi(2) + (a[1] - f * b[1]).powi(2)).sqrt();
            1.0 / r.max(1e-9)
        });
        if !next.is_finite() {
            break;
        }
        focal = next;
    }
    Ok(focal)
}
