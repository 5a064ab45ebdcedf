use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::tracker::Detection;
use crate::worldproj::{estimate_scale, Homology};

/// Person-detector acceptance rules.
///
/// With a world-plane calibration the detector searches a single scale per
/// foot position, the height predicted by the homology. Without it the
/// detector runs at every scale and only uses the scale of a nearby track,
/// when there is one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorFilter {
    /// Relative height tolerance around the homology prediction.
    pub world_tolerance: f64,
    /// Relative height tolerance around a nearby track's scale.
    pub image_tolerance: f64,
    /// A track is nearby when its predicted foot lies within this fraction of
    /// its height.
    pub near_fraction: f64,
    /// Scale range of the multi-scale search, pixels.
    pub min_height_px: f64,
    pub max_height_px: f64,
}

impl Default for DetectorFilter {
    fn default() -> Self {
        Self {
            world_tolerance: 0.2,
            image_tolerance: 0.15,
            near_fraction: 0.5,
            min_height_px: 20.0,
            max_height_px: 400.0,
        }
    }
}

impl DetectorFilter {
    fn in_range(&self, h: f64) -> bool {
        (self.min_height_px..=self.max_height_px).contains(&h)
    }

    /// Accepts a detection whose height matches the homology at its foot.
    /// Without a homology every detection in the scale range passes.
    pub fn accept_world(&self, d: &Detection, homology: Option<&Homology>) -> bool {
        let Some(h) = homology else {
            return self.in_range(d.height_px);
        };
        match estimate_scale(h, &d.p) {
            Ok(s) if s.height_px > 0.0 => {
                (d.height_px / s.height_px - 1.0).abs() <= self.world_tolerance
            }
            _ => false,
        }
    }

    /// `tracks` holds `(id, predicted foot, height)` of the active tracks.
    pub fn accept_image(&self, d: &Detection, tracks: &[(u64, Option<Point2<f64>>, f64)]) -> bool {
        let mut near = tracks
            .iter()
            .filter_map(|(_, p, h)| p.map(|p| (p, *h)))
            .filter(|(p, h)| *h > 0.0 && (p - d.p).norm() <= self.near_fraction * h)
            .peekable();
        if near.peek().is_none() {
            return self.in_range(d.height_px);
        }
        near.any(|(_, h)| (d.height_px / h - 1.0).abs() <= self.image_tolerance)
    }
}
