use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::scene_map::{descriptor_distance, Observation};

/// Repeated captures of each keyframe while the camera is at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeCapture {
    pub captures: usize,
    /// Largest distance between a keypoint and the running mean of its track, pixels.
    pub radius_px: f64,
    /// Keypoints found in fewer captures than this fraction are dropped.
    pub min_fraction: f64,
    pub descriptor_limit: f32,
}

impl Default for KeyframeCapture {
    fn default() -> Self {
        Self {
            captures: 10,
            radius_px: 3.0,
            min_fraction: 0.5,
            descriptor_limit: 0.5,
        }
    }
}

impl KeyframeCapture {
    /// Fewest captures a kept keypoint was found in.
    pub fn min_count(&self) -> usize {
        ((self.min_fraction * self.captures as f64).ceil() as usize).max(1)
    }
}

struct Track {
    sum: Point2<f64>,
    desc: Vec<f32>,
    count: usize,
    last: usize,
}

impl Track {
    fn mean(&self) -> Point2<f64> {
        Point2::from(self.sum.coords / self.count as f64)
    }
}

/// Merges the keypoints of repeated static captures into averaged keypoints.
///
/// Each keypoint joins the nearest track (by running mean) within the radius
/// whose descriptor is close and which has no keypoint from the same capture.
/// Positions and descriptors are averaged; the covariance is divided by the
/// number of captures the keypoint was found in. Tracks seen fewer than
/// `min_count` times are dropped, which removes transient clutter.
pub fn merge_captures(captures: &[Vec<Observation>], config: &KeyframeCapture) -> Vec<Observation> {
    let mut tracks: Vec<Track> = Vec::new();
    let mut covs = Vec::new();
    let r2 = config.radius_px * config.radius_px;
    for (c, obs) in captures.iter().enumerate() {
        for o in obs {
            let best = tracks
                .iter()
                .enumerate()
                .filter(|(_, t)| t.last != c)
                .map(|(i, t)| (i, (t.mean() - o.pos).norm_squared()))
                .filter(|&(i, d2)| {
                    d2 <= r2
                        && descriptor_distance(&tracks[i].desc, &o.desc) <= config.descriptor_limit
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((i, _)) => {
                    let t = &mut tracks[i];
                    t.sum += o.pos.coords;
                    let n = t.count as f32;
                    for (d, x) in t.desc.iter_mut().zip(&o.desc) {
                        *d = (*d * n + x) / (n + 1.0);
                    }
                    t.count += 1;
                    t.last = c;
                }
                None => {
                    tracks.push(Track {
                        sum: o.pos,
                        desc: o.desc.clone(),
                        count: 1,
                        last: c,
                    });
                    covs.push(o.cov);
                }
            }
        }
    }
    let min_count = config.min_count().min(captures.len().max(1));
    tracks
        .iter()
        .zip(covs)
        .filter(|(t, _)| t.count >= min_count)
        .map(|(t, cov)| Observation::new(t.mean(), t.desc.clone()).with_cov(cov / t.count as f64))
        .collect()
}
