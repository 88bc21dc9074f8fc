//! Overlapping temporal clips over an N-frame video.

use crate::geometry::{DisparityMap, PointMap, RayMap, UncertaintyMap, DISPARITY_MIN, SIGMA_FLOOR};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WindowError {
    #[error("video too short: {frames} frames but window length is {window}")]
    VideoTooShort { frames: usize, window: usize },
    #[error("window length must be at least 1")]
    EmptyWindow,
    #[error("stride must be in [1, window], got {stride} (window {window})")]
    InvalidStride { stride: usize, window: usize },
}

/// Start indices of the V-frame clips covering an N-frame video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowIndex {
    pub frames: usize,
    pub window: usize,
    pub stride: usize,
    pub starts: Vec<usize>,
}

/// Starts `{0, s, 2s, ..., floor((N-V)/s) s} ∪ {N-V}`, sorted and deduplicated.
pub fn build_window_index(
    frames: usize,
    window: usize,
    stride: usize,
) -> Result<WindowIndex, WindowError> {
    if window == 0 {
        return Err(WindowError::EmptyWindow);
    }
    // A stride longer than the window would leave frames uncovered.
    if stride == 0 || stride > window {
        return Err(WindowError::InvalidStride { stride, window });
    }
    if window > frames {
        return Err(WindowError::VideoTooShort { frames, window });
    }
    let last = frames - window;
    let mut starts: Vec<usize> = (0..=last / stride).map(|k| k * stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(WindowIndex {
        frames,
        window,
        stride,
        starts,
    })
}

impl WindowIndex {
    /// Frames `[start, start + V)` of the clip with the given start.
    pub fn frames_of(&self, start: usize) -> std::ops::Range<usize> {
        start..start + self.window
    }

    /// Indices (into `starts`) of every clip containing `frame`.
    pub fn groups_containing(&self, frame: usize) -> Vec<usize> {
        self.starts
            .iter()
            .enumerate()
            .filter(|(_, &s)| s <= frame && frame < s + self.window)
            .map(|(g, _)| g)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Global frames shared by the clips starting at `a` and `b`.
pub fn overlap(a: usize, b: usize, window: usize) -> Vec<usize> {
    let lo = a.max(b);
    let hi = (a + window).min(b + window);
    (lo..hi.max(lo)).collect()
}

/// Predictions for one clip: per-frame maps expressed relative to the clip.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGroup {
    /// Global index of the clip's first frame.
    pub start: usize,
    pub points: Vec<PointMap>,
    pub disparity: Vec<DisparityMap>,
    pub uncertainty: Vec<UncertaintyMap>,
    /// Ray maps are optional; without them the camera term is skipped.
    pub rays: Option<Vec<RayMap>>,
}

impl WindowGroup {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.frames().contains(&frame)
    }

    /// Position of a global frame inside the clip.
    pub fn local(&self, frame: usize) -> Option<usize> {
        self.contains(frame).then(|| frame - self.start)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.points
            .first()
            .map(|p| p.shape())
            .unwrap_or((0, 0))
    }

    /// Whether pixel `idx` of local frame `local` carries a usable prediction.
    #[inline]
    pub fn is_valid(&self, local: usize, idx: usize) -> bool {
        let d = self.disparity[local].as_slice()[idx];
        let x = &self.points[local].as_slice()[idx];
        d >= DISPARITY_MIN && x.iter().all(|c| c.is_finite())
    }

    /// Uncertainty clamped from below.
    #[inline]
    pub fn sigma(&self, local: usize, idx: usize) -> f64 {
        let s = self.uncertainty[local].as_slice()[idx];
        if s.is_finite() {
            s.max(SIGMA_FLOOR)
        } else {
            f64::INFINITY
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_examples() {
        assert_eq!(build_window_index(16, 16, 4).unwrap().starts, vec![0]);
        assert_eq!(build_window_index(20, 16, 4).unwrap().starts, vec![0, 4]);
        assert_eq!(
            build_window_index(30, 16, 4).unwrap().starts,
            vec![0, 4, 8, 12, 14]
        );
        assert_eq!(
            build_window_index(17, 16, 1).unwrap().starts,
            vec![0, 1]
        );
    }

    #[test]
    fn window_errors() {
        assert_eq!(
            build_window_index(10, 16, 4),
            Err(WindowError::VideoTooShort {
                frames: 10,
                window: 16
            })
        );
        assert_eq!(
            build_window_index(20, 16, 0),
            Err(WindowError::InvalidStride {
                stride: 0,
                window: 16
            })
        );
        assert!(matches!(
            build_window_index(40, 16, 17),
            Err(WindowError::InvalidStride { .. })
        ));
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap(0, 4, 16), (4..16).collect::<Vec<_>>());
        assert_eq!(overlap(0, 0, 16), (0..16).collect::<Vec<_>>());
        assert!(overlap(0, 16, 16).is_empty());
        assert!(overlap(20, 0, 16).is_empty());
    }

    #[test]
    fn groups_containing_frames() {
        let idx = build_window_index(30, 16, 4).unwrap();
        assert_eq!(idx.groups_containing(0), vec![0]);
        assert_eq!(idx.groups_containing(14), vec![0, 1, 2, 3, 4]);
        assert_eq!(idx.groups_containing(29), vec![4]);
    }

    #[test]
    fn refinement_keeps_common_multiples() {
        for n in 16..60 {
            let coarse = build_window_index(n, 16, 8).unwrap();
            for fine_stride in [4, 2] {
                let fine = build_window_index(n, 16, fine_stride).unwrap();
                for s in coarse.starts.iter().filter(|s| *s % 8 == 0) {
                    assert!(fine.starts.contains(s), "n={n} s={s}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn coverage_and_shape(v in 1usize..40, extra in 0usize..80, s_raw in 1usize..40) {
            let s = 1 + (s_raw - 1) % v;
            let n = v + extra;
            let idx = build_window_index(n, v, s).unwrap();
            prop_assert_eq!(idx.starts[0], 0);
            prop_assert_eq!(*idx.starts.last().unwrap(), n - v);
            prop_assert!(idx.starts.windows(2).all(|w| w[0] < w[1]));
            let mut covered = vec![false; n];
            for &st in &idx.starts {
                for f in idx.frames_of(st) {
                    covered[f] = true;
                }
            }
            prop_assert!(covered.iter().all(|c| *c));
            if s < v {
                for w in idx.starts.windows(2) {
                    prop_assert!(!overlap(w[0], w[1], v).is_empty());
                    prop_assert!(overlap(w[0], w[1], v).len() >= v - s);
                }
            }
        }
    }
}
