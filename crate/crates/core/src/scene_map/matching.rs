//! Nearest-neighbour distance-ratio matching between frame observations and a view map.

use nalgebra::Matrix2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{KdForest, Landmark, MapError, Observation, ViewMap};
use crate::geometry::PointMatch;

/// Landmark count at which matching switches from brute force to the k-d forest.
pub const BRUTE_FORCE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Nearest / second-nearest distance ratio cutoff.
    pub ratio: f64,
    /// Landmarks drawn at random from the view map per frame.
    pub sample_size: usize,
    pub kd_trees: usize,
    pub kd_checks: usize,
    pub brute_force_limit: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            sample_size: 1000,
            kd_trees: 4,
            kd_checks: 128,
            brute_force_limit: BRUTE_FORCE_LIMIT,
        }
    }
}

/// Accepted correspondence: observation index, landmark index (into the view's
/// landmark list) and Euclidean descriptor distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorMatch {
    pub obs: usize,
    pub landmark: usize,
    pub distance: f32,
}

pub fn descriptor_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

/// Sorted indices of `sample_size` landmarks drawn uniformly without replacement
/// (all landmarks when the view holds fewer).
pub fn sample_landmarks<R: Rng + ?Sized>(
    view: &ViewMap,
    sample_size: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = view.landmarks.len();
    let k = sample_size.min(n);
    let mut sampled: Vec<usize> = if k == n {
        (0..n).collect()
    } else {
        index::sample(rng, n, k).into_vec()
    };
    sampled.sort_unstable();
    sampled
}

/// Ratio-test matching of `obs` against a random subset of the view's landmarks.
///
/// The result is a partial injection: when several observations select the same
/// landmark only the closest one is kept. Output is sorted by observation index.
pub fn match_descriptors<R: Rng + ?Sized>(
    obs: &[Observation],
    view: &ViewMap,
    config: &MatchConfig,
    rng: &mut R,
) -> Vec<DescriptorMatch> {
    let sampled = sample_landmarks(view, config.sample_size, rng);
    match_sampled(obs, view, &sampled, config, rng)
}

/// Ratio-test matching restricted to the landmark indices in `sampled`.
pub fn match_sampled<R: Rng + ?Sized>(
    obs: &[Observation],
    view: &ViewMap,
    sampled: &[usize],
    config: &MatchConfig,
    rng: &mut R,
) -> Vec<DescriptorMatch> {
    let n = view.landmarks.len();
    if sampled.len() < 2 || obs.is_empty() {
        return Vec::new();
    }

    let candidates: Vec<Option<(usize, f32, f32)>> = if sampled.len() >= config.brute_force_limit {
        let data = sampled
            .iter()
            .map(|&i| view.landmarks[i].desc.clone())
            .collect();
        let forest = KdForest::build(data, config.kd_trees, rng);
        obs.iter()
            .map(
                |o| match forest.knn2(&o.desc, config.kd_checks).as_slice() {
                    [a, b] => Some((sampled[a.0], a.1.sqrt(), b.1.sqrt())),
                    _ => None,
                },
            )
            .collect()
    } else {
        obs.iter()
            .map(|o| brute_knn2(&o.desc, &view.landmarks, sampled))
            .collect()
    };

    let mut best_for_landmark: Vec<Option<DescriptorMatch>> = vec![None; n];
    for (oi, cand) in candidates.into_iter().enumerate() {
        let Some((li, d1, d2)) = cand else { continue };
        if !(f64::from(d1) < config.ratio * f64::from(d2)) {
            continue;
        }
        let m = DescriptorMatch {
            obs: oi,
            landmark: li,
            distance: d1,
        };
        match &best_for_landmark[li] {
            Some(prev) if prev.distance <= d1 => {}
            _ => best_for_landmark[li] = Some(m),
        }
    }
    let mut out: Vec<DescriptorMatch> = best_for_landmark.into_iter().flatten().collect();
    out.sort_by_key(|m| m.obs);
    out
}

fn brute_knn2(q: &[f32], landmarks: &[Landmark], sampled: &[usize]) -> Option<(usize, f32, f32)> {
    let mut best = (usize::MAX, f32::INFINITY);
    let mut second = f32::INFINITY;
    for &i in sampled {
        let d: f32 = q
            .iter()
            .zip(&landmarks[i].desc)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        if d < best.1 {
            second = best.1;
            best = (i, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0 != usize::MAX && second.is_finite()).then(|| (best.0, best.1.sqrt(), second.sqrt()))
}

/// Frame → view-map correspondences for the accepted matches.
pub fn to_point_matches(
    matches: &[DescriptorMatch],
    obs: &[Observation],
    view: &ViewMap,
) -> Vec<PointMatch> {
    matches
        .iter()
        .map(|m| {
            let o = &obs[m.obs];
            let l = &view.landmarks[m.landmark];
            let lm_cov: Matrix2<f64> = l.cov;
            PointMatch::new(o.pos, l.pos).with_covariances(o.cov, lm_cov)
        })
        .collect()
}

/// Running average with forgetting factor `alpha` in (0, 1].
pub fn update_descriptor(lm: &mut Landmark, new_desc: &[f32], alpha: f32) -> Result<(), MapError> {
    if lm.desc.len() != new_desc.len() {
        return Err(MapError::DimensionMismatch {
            expected: lm.desc.len(),
            got: new_desc.len(),
        });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MapError::InvalidParameter(format!(
            "forgetting factor {alpha} outside (0, 1]"
        )));
    }
    if alpha == 1.0 {
        lm.desc.copy_from_slice(new_desc);
        return Ok(());
    }
    for (d, n) in lm.desc.iter_mut().zip(new_desc) {
        *d += alpha * (n - *d);
    }
    Ok(())
}
