use std::collections::HashMap;

use nalgebra::{Matrix2, Point2};
use serde::{Deserialize, Serialize};

use super::CalibrateError;
use crate::geometry::Homography;
use crate::scene_map::{
    descriptor_distance, update_descriptor, Descriptor, DescriptorMatch, Landmark, Observation,
    ViewMap,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifecycleConfig {
    /// Consecutive sampled-and-unmatched frames after which a landmark dies.
    pub death_threshold: u32,
    /// Consecutive frames a candidate must persist before promotion.
    pub birth_persistence: u32,
    /// Original landmarks per view that are never terminated.
    pub protected_originals: usize,
    pub max_landmarks: usize,
    pub proximity_threshold: f64,
    pub proximity_check: bool,
    /// Added to the founding observation covariance at birth, pixels².
    pub birth_inflation: f64,
    /// Candidate association radius in the view-map frame, pixels.
    pub candidate_radius: f64,
    /// Largest descriptor distance for candidate association.
    pub candidate_descriptor_limit: f32,
    /// Descriptor forgetting factor.
    pub alpha: f32,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            death_threshold: 20,
            birth_persistence: 20,
            protected_originals: 50,
            max_landmarks: 4000,
            proximity_threshold: 0.5,
            proximity_check: true,
            birth_inflation: 1.0,
            candidate_radius: 3.0,
            candidate_descriptor_limit: 0.5,
            alpha: 0.1,
        }
    }
}

/// Ratio of the inlier bounding-box area to the area of that box extended to
/// contain `candidate`.
pub fn proximity_check(
    candidate: &Point2<f64>,
    inliers: &[Point2<f64>],
) -> Result<f64, CalibrateError> {
    let first = inliers.first().ok_or(CalibrateError::NoInliers)?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
    for p in inliers {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let inside = candidate.x >= x0 && candidate.x <= x1 && candidate.y >= y0 && candidate.y <= y1;
    let a = (x1 - x0) * (y1 - y0);
    let b =
        (x1.max(candidate.x) - x0.min(candidate.x)) * (y1.max(candidate.y) - y0.min(candidate.y));
    if inside {
        return Ok(1.0);
    }
    if !(b > 0.0) || !b.is_finite() {
        return Ok(0.0);
    }
    Ok((a / b).clamp(0.0, 1.0))
}

/// Unexplained keypoint tracked in a view-map frame while it builds persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub pos: Point2<f64>,
    pub desc: Descriptor,
    pub cov: Matrix2<f64>,
    pub count: u32,
    pub first_frame: u64,
    pub last_frame: u64,
}

/// Candidates of one view map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleStats {
    pub births: usize,
    pub deaths: usize,
}

/// Inputs of one lifecycle step, all relative to the active view map.
pub struct FrameEvidence<'a> {
    pub frame: u64,
    /// Frame → view map.
    pub h: &'a Homography,
    pub obs: &'a [Observation],
    /// RANSAC-consistent descriptor matches.
    pub inliers: &'a [DescriptorMatch],
    /// Landmark indices offered to the matcher this frame.
    pub sampled: &'a [usize],
    pub image_size: [f64; 2],
}

struct Grid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(cell: f64, points: impl Iterator<Item = Point2<f64>>) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.enumerate() {
            buckets.entry(Self::key(cell, &p)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(cell: f64, p: &Point2<f64>) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    fn neighbours(&self, p: &Point2<f64>) -> impl Iterator<Item = usize> + '_ {
        let (kx, ky) = Self::key(self.cell, p);
        (-1..=1)
            .flat_map(move |dx| (-1..=1).map(move |dy| (kx + dx, ky + dy)))
            .filter_map(|k| self.buckets.get(&k))
            .flatten()
            .copied()
    }
}

/// Birth–death maintenance of one view map for one calibrated frame.
///
/// Matched landmarks get their counters reset and descriptors averaged. Sampled
/// landmarks that project into the frame but went unmatched age by one frame
/// and die at the threshold, except that originals are never removed below the
/// protected floor. Unexplained observations feed the candidate set; candidates
/// that persisted long enough and pass the proximity check become landmarks.
pub fn lifecycle_step(
    view: &mut ViewMap,
    candidates: &mut CandidateSet,
    ev: &FrameEvidence<'_>,
    config: &LifecycleConfig,
) -> LifecycleStats {
    let mut stats = LifecycleStats::default();
    let n = view.landmarks.len();
    let mut matched = vec![false; n];
    let mut obs_used = vec![false; ev.obs.len()];
    for m in ev.inliers {
        matched[m.landmark] = true;
        obs_used[m.obs] = true;
        let lm = &mut view.landmarks[m.landmark];
        lm.frames_since_match = 0;
        lm.frames_seen = lm.frames_seen.saturating_add(1);
        // Dimension is uniform within a run; a mismatch would have failed matching.
        let _ = update_descriptor(lm, &ev.obs[m.obs].desc, config.alpha);
    }

    let h_inv = ev.h.inverse().ok();
    if let Some(h_inv) = &h_inv {
        for &i in ev.sampled {
            if matched[i] {
                continue;
            }
            let lm = &mut view.landmarks[i];
            if let Ok(p) = h_inv.transfer(&lm.pos) {
                if p.x >= 0.0 && p.y >= 0.0 && p.x < ev.image_size[0] && p.y < ev.image_size[1] {
                    lm.frames_since_match = lm.frames_since_match.saturating_add(1);
                }
            }
        }
    }

    // Candidate association in the view-map frame.
    let grid = Grid::new(
        config.candidate_radius,
        view.landmarks.iter().map(|l| l.pos),
    );
    let r2 = config.candidate_radius * config.candidate_radius;
    candidates
        .candidates
        .retain(|c| c.last_frame + 1 >= ev.frame);
    let mut claimed = vec![false; candidates.candidates.len()];
    let mut fresh = Vec::new();
    for (oi, o) in ev.obs.iter().enumerate() {
        if obs_used[oi] {
            continue;
        }
        let Ok(p) = ev.h.transfer(&o.pos) else {
            continue;
        };
        if grid
            .neighbours(&p)
            .any(|j| (view.landmarks[j].pos - p).norm_squared() <= r2)
        {
            continue;
        }
        let best = candidates
            .candidates
            .iter()
            .enumerate()
            .filter(|(ci, c)| {
                !claimed[*ci] && c.last_frame < ev.frame && (c.pos - p).norm_squared() <= r2
            })
            .filter(|(_, c)| {
                descriptor_distance(&c.desc, &o.desc) <= config.candidate_descriptor_limit
            })
            .min_by(|a, b| {
                (a.1.pos - p)
                    .norm_squared()
                    .total_cmp(&(b.1.pos - p).norm_squared())
            })
            .map(|(ci, _)| ci);
        match best {
            Some(ci) => {
                claimed[ci] = true;
                let c = &mut candidates.candidates[ci];
                c.count += 1;
                let w = 1.0 / f64::from(c.count);
                c.pos += (p - c.pos) * w;
                for (d, x) in c.desc.iter_mut().zip(&o.desc) {
                    *d += config.alpha * (x - *d);
                }
                c.last_frame = ev.frame;
            }
            None => {
                let jac =
                    ev.h.linearize_at(&o.pos)
                        .unwrap_or_else(|_| Matrix2::identity());
                fresh.push(Candidate {
                    pos: p,
                    desc: o.desc.clone(),
                    cov: jac * o.cov * jac.transpose()
                        + Matrix2::identity() * config.birth_inflation,
                    count: 1,
                    first_frame: ev.frame,
                    last_frame: ev.frame,
                });
            }
        }
    }
    candidates.candidates.retain(|c| c.last_frame == ev.frame);
    candidates.candidates.extend(fresh);

    // Promotion.
    let inlier_pos: Vec<Point2<f64>> = ev
        .inliers
        .iter()
        .map(|m| view.landmarks[m.landmark].pos)
        .collect();
    let mut keep = Vec::with_capacity(candidates.candidates.len());
    for c in std::mem::take(&mut candidates.candidates) {
        if c.count >= config.birth_persistence && view.landmarks.len() < config.max_landmarks {
            let accepted = !config.proximity_check
                || proximity_check(&c.pos, &inlier_pos)
                    .is_ok_and(|r| r >= config.proximity_threshold);
            if accepted {
                view.push_landmark(Landmark {
                    id: 0,
                    pos: c.pos,
                    desc: c.desc,
                    cov: c.cov,
                    frames_seen: c.count,
                    frames_since_match: 0,
                    born_at: ev.frame,
                    original: false,
                });
                stats.births += 1;
                continue;
            }
        }
        keep.push(c);
    }
    candidates.candidates = keep;

    // Deaths.
    let mut originals = view.original_count();
    let before = view.landmarks.len();
    view.landmarks.retain(|l| {
        if l.frames_since_match < config.death_threshold {
            return true;
        }
        if l.original {
            if originals <= config.protected_originals {
                return true;
            }
            originals -= 1;
        }
        false
    });
    stats.deaths = before - view.landmarks.len();
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::scene_map::ActuatorReading;
    use nalgebra::Matrix3;

    #[test]
    fn proximity_ratios() {
        let a = [Point2::new(0.0, 0.0), Point2::new(10.0, 10.0)];
        assert_eq!(proximity_check(&Point2::new(5.0, 5.0), &a).unwrap(), 1.0);
        let r = proximity_check(&Point2::new(11.0, 5.0), &a).unwrap();
        assert!((r - 1.0 / 1.1).abs() < 1e-12);
        assert!(proximity_check(&Point2::new(1e12, 1e12), &a).unwrap() < 1e-20);
        assert!(matches!(
            proximity_check(&Point2::origin(), &[]),
            Err(CalibrateError::NoInliers)
        ));
    }

    fn view(n: usize) -> ViewMap {
        let mut v = ViewMap::new(
            0,
            ActuatorReading::new(0.0, 0.0, 1.0),
            Homography::identity(),
            Intrinsics::new(500.0, Point2::new(50.0, 50.0)),
            Matrix3::identity(),
        );
        for i in 0..n {
            v.push_landmark(Landmark {
                id: 0,
                pos: Point2::new((i % 10) as f64 * 10.0 + 1.0, (i / 10) as f64 * 10.0 + 1.0),
                desc: vec![i as f32, 0.0],
                cov: Matrix2::identity(),
                frames_seen: 0,
                frames_since_match: 0,
                born_at: 0,
                original: true,
            });
        }
        v
    }

    fn all_matched(v: &ViewMap) -> (Vec<Observation>, Vec<DescriptorMatch>) {
        let obs: Vec<_> = v
            .landmarks
            .iter()
            .map(|l| Observation::new(l.pos, l.desc.clone()))
            .collect();
        let m = (0..obs.len())
            .map(|i| DescriptorMatch {
                obs: i,
                landmark: i,
                distance: 0.0,
            })
            .collect();
        (obs, m)
    }

    #[test]
    fn fully_matched_map_is_stable() {
        let mut v = view(60);
        let before = v.clone();
        let (obs, m) = all_matched(&v);
        let sampled: Vec<usize> = (0..60).collect();
        let mut cands = CandidateSet::default();
        for f in 0..50 {
            let ev = FrameEvidence {
                frame: f,
                h: &Homography::identity(),
                obs: &obs,
                inliers: &m,
                sampled: &sampled,
                image_size: [100.0, 100.0],
            };
            let s = lifecycle_step(&mut v, &mut cands, &ev, &LifecycleConfig::default());
            assert_eq!(s, LifecycleStats::default());
        }
        assert_eq!(v.landmarks.len(), 60);
        for (a, b) in v.landmarks.iter().zip(&before.landmarks) {
            assert_eq!(a.pos, b.pos);
            assert_eq!(a.desc, b.desc);
        }
    }

    #[test]
    fn unmatched_landmarks_die_down_to_protected_floor() {
        let mut v = view(60);
        let sampled: Vec<usize> = (0..60).collect();
        let mut cands = CandidateSet::default();
        let cfg = LifecycleConfig::default();
        let mut deaths = 0;
        for f in 0..cfg.death_threshold as u64 {
            let ev = FrameEvidence {
                frame: f,
                h: &Homography::identity(),
                obs: &[],
                inliers: &[],
                sampled: &sampled,
                image_size: [100.0, 100.0],
            };
            deaths += lifecycle_step(&mut v, &mut cands, &ev, &cfg).deaths;
        }
        assert_eq!(deaths, 10);
        assert_eq!(v.landmarks.len(), 50);
    }

    #[test]
    fn non_original_landmarks_die_at_threshold() {
        let mut v = view(60);
        for l in v.landmarks.iter_mut().skip(55) {
            l.original = false;
        }
        let sampled: Vec<usize> = (0..60).collect();
        let (obs, m) = all_matched(&v);
        let m: Vec<_> = m.into_iter().take(55).collect();
        let mut cands = CandidateSet::default();
        let cfg = LifecycleConfig::default();
        for f in 0..(cfg.death_threshold - 1) as u64 {
            let ev = FrameEvidence {
                frame: f,
                h: &Homography::identity(),
                obs: &obs[..55],
                inliers: &m,
                sampled: &sampled,
                image_size: [100.0, 100.0],
            };
            assert_eq!(lifecycle_step(&mut v, &mut cands, &ev, &cfg).deaths, 0);
        }
        let ev = FrameEvidence {
            frame: 99,
            h: &Homography::identity(),
            obs: &obs[..55],
            inliers: &m,
            sampled: &sampled,
            image_size: [100.0, 100.0],
        };
        assert_eq!(lifecycle_step(&mut v, &mut cands, &ev, &cfg).deaths, 5);
    }

    #[test]
    fn persistent_candidate_is_born() {
        let mut v = view(60);
        let (mut obs, m) = all_matched(&v);
        obs.push(Observation::new(Point2::new(45.0, 25.0), vec![-7.0, 3.0]));
        let sampled: Vec<usize> = (0..60).collect();
        let mut cands = CandidateSet::default();
        let cfg = LifecycleConfig::default();
        let mut births = 0;
        for f in 0..cfg.birth_persistence as u64 {
            let ev = FrameEvidence {
                frame: f,
                h: &Homography::identity(),
                obs: &obs,
                inliers: &m,
                sampled: &sampled,
                image_size: [100.0, 100.0],
            };
            births += lifecycle_step(&mut v, &mut cands, &ev, &cfg).births;
            if f + 1 < u64::from(cfg.birth_persistence) {
                assert_eq!(births, 0);
            }
        }
        assert_eq!(births, 1);
        let born = v.landmarks.last().unwrap();
        assert!((born.pos - Point2::new(45.0, 25.0)).norm() < 1e-12);
        assert!(!born.original);
        assert_eq!(born.id, 60);
    }

    #[test]
    fn interrupted_candidate_restarts() {
        let mut v = view(60);
        let (obs, m) = all_matched(&v);
        let mut with_extra = obs.clone();
        with_extra.push(Observation::new(Point2::new(45.0, 25.0), vec![-7.0, 3.0]));
        let sampled: Vec<usize> = (0..60).collect();
        let mut cands = CandidateSet::default();
        let cfg = LifecycleConfig::default();
        for f in 0..30u64 {
            let o = if f == 10 { &obs } else { &with_extra };
            let ev = FrameEvidence {
                frame: f,
                h: &Homography::identity(),
                obs: o,
                inliers: &m,
                sampled: &sampled,
                image_size: [100.0, 100.0],
            };
            let s = lifecycle_step(&mut v, &mut cands, &ev, &cfg);
            assert_eq!(s.births, 0);
        }
        assert_eq!(v.landmarks.len(), 60);
    }

    #[test]
    fn far_candidate_fails_proximity() {
        let mut v = view(60);
        let (mut obs, m) = all_matched(&v);
        obs.push(Observation::new(Point2::new(400.0, 400.0), vec![-7.0, 3.0]));
        let sampled: Vec<usize> = (0..60).collect();
        let mut cands = CandidateSet::default();
        for f in 0..40u64 {
            let ev = FrameEvidence {
                frame: f,
                h: &Homography::identity(),
                obs: &obs,
                inliers: &m,
                sampled: &sampled,
                image_size: [1000.0, 1000.0],
            };
            assert_eq!(
                lifecycle_step(&mut v, &mut cands, &ev, &LifecycleConfig::default()).births,
                0
            );
        }
        let no_check = LifecycleConfig {
            proximity_check: false,
            ..LifecycleConfig::default()
        };
        let ev = FrameEvidence {
            frame: 40,
            h: &Homography::identity(),
            obs: &obs,
            inliers: &m,
            sampled: &sampled,
            image_size: [1000.0, 1000.0],
        };
        assert_eq!(lifecycle_step(&mut v, &mut cands, &ev, &no_check).births, 1);
    }
}
