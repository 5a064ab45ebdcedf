use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CalibrateError;
use crate::geometry::{
    estimate_homography_dlt, has_collinear_triple, homography_covariance, Homography, PointMatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// One-way transfer error bound for inliers, pixels.
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            max_iterations: 1000,
            confidence: 0.999,
            min_inliers: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacOutcome {
    /// Frame → view map, with covariance over the inlier set.
    pub homography: Homography,
    /// Indices into the input matches, ascending.
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

const REFINE_ROUNDS: usize = 10;

fn inliers_of(h: &Homography, matches: &[PointMatch], threshold: f64) -> Vec<usize> {
    let m = h.matrix();
    (0..matches.len())
        .filter(|&i| {
            let s = &matches[i].src;
            let w = m[(2, 0)] * s.x + m[(2, 1)] * s.y + m[(2, 2)];
            if w.abs() < 1e-12 {
                return false;
            }
            let x = (m[(0, 0)] * s.x + m[(0, 1)] * s.y + m[(0, 2)]) / w;
            let y = (m[(1, 0)] * s.x + m[(1, 1)] * s.y + m[(1, 2)]) / w;
            let (dx, dy) = (x - matches[i].dst.x, y - matches[i].dst.y);
            dx * dx + dy * dy <= threshold * threshold
        })
        .collect()
}

fn subset(matches: &[PointMatch], idx: &[usize]) -> Vec<PointMatch> {
    idx.iter().map(|&i| matches[i].clone()).collect()
}

/// Robust frame → view-map homography.
///
/// Four-point RANSAC with adaptive termination, then DLT re-estimation on the
/// consensus set until it stops changing. Every reported inlier satisfies the
/// threshold under the returned homography.
pub fn estimate_frame_homography<R: Rng + ?Sized>(
    matches: &[PointMatch],
    config: &RansacConfig,
    rng: &mut R,
) -> Result<RansacOutcome, CalibrateError> {
    let required = config.min_inliers.max(4);
    if matches.len() < 4 {
        return Err(CalibrateError::InsufficientInliers {
            found: matches.len(),
            required,
        });
    }
    let n = matches.len();
    let mut best: Vec<usize> = Vec::new();
    let mut needed = config.max_iterations;
    let mut it = 0;
    while it < needed.min(config.max_iterations) {
        it += 1;
        let sample = index::sample(rng, n, 4).into_vec();
        let src: Vec<_> = sample.iter().map(|&i| matches[i].src).collect();
        let dst: Vec<_> = sample.iter().map(|&i| matches[i].dst).collect();
        if has_collinear_triple(&src) || has_collinear_triple(&dst) {
            continue;
        }
        let Ok(h) = estimate_homography_dlt(&subset(matches, &sample)) else {
            continue;
        };
        let inl = inliers_of(&h, matches, config.threshold_px);
        if inl.len() > best.len() {
            best = inl;
            let w = best.len() as f64 / n as f64;
            let p_fail = 1.0 - w.powi(4);
            needed = if p_fail <= f64::EPSILON {
                it
            } else {
                ((1.0 - config.confidence).ln() / p_fail.ln()).ceil() as usize
            };
        }
    }
    if best.len() < required {
        return Err(CalibrateError::InsufficientInliers {
            found: best.len(),
            required,
        });
    }

    let mut h = estimate_homography_dlt(&subset(matches, &best))?;
    for _ in 0..REFINE_ROUNDS {
        let next = inliers_of(&h, matches, config.threshold_px);
        if next == best || next.len() < required {
            break;
        }
        best = next;
        h = estimate_homography_dlt(&subset(matches, &best))?;
    }
    let inliers = inliers_of(&h, matches, config.threshold_px);
    if inliers.len() < required {
        return Err(CalibrateError::InsufficientInliers {
            found: inliers.len(),
            required,
        });
    }
    let cov = homography_covariance(&h, &subset(matches, &best))?;
    Ok(RansacOutcome {
        homography: h.with_covariance(cov),
        inliers,
        iterations: it,
    })
}
