//! Off-line scene-map initialization: rotation-only bundle adjustment of the
//! keyframes and registration of the reference mosaic to the world plane.

mod bundle;
mod captures;
mod registration;

pub use bundle::{
    bundle_adjust, initial_guess, BundleConfig, BundleProblem, BundleSolution, BundleView,
    ViewPairMatches,
};
pub use captures::{merge_captures, KeyframeCapture};
pub use registration::{rectify_from_vanishing, scale_from_known_distance, WorldRegistration};

use nalgebra::{Matrix2, Point2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose_rotation_homography, GeometryError, Intrinsics};
use crate::scene_map::{ActuatorReading, Descriptor, Landmark, SceneMap, ViewMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("keyframe {0} is not connected to the reference keyframe")]
    DisconnectedGraph(u32),
    #[error("bundle adjustment did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("vanishing points do not define a plane")]
    DegenerateVanishingGeometry,
    #[error("registration points coincide")]
    CoincidentPoints,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Motor zoom → focal length calibration, interpolated linearly in log-log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalTable {
    pub zoom: Vec<f64>,
    pub focal: Vec<f64>,
}

impl FocalTable {
    /// Focal proportional to the zoom magnification.
    pub fn linear(focal_at_unit_zoom: f64) -> Self {
        Self {
            zoom: vec![1.0],
            focal: vec![focal_at_unit_zoom],
        }
    }

    pub fn focal_at(&self, zoom: f64) -> f64 {
        let n = self.zoom.len().min(self.focal.len());
        if n == 0 {
            return zoom;
        }
        if n == 1 {
            return self.focal[0] * zoom / self.zoom[0];
        }
        let lz = zoom.ln();
        let i = (1..n - 1)
            .find(|&i| lz < self.zoom[i].ln())
            .unwrap_or(n - 1);
        let (z0, z1) = (self.zoom[i - 1].ln(), self.zoom[i].ln());
        let (f0, f1) = (self.focal[i - 1].ln(), self.focal[i].ln());
        let t = (lz - z0) / (z1 - z0);
        (f0 + t * (f1 - f0)).exp()
    }
}

/// Landmarks detected in one keyframe at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeLandmarks {
    pub id: u32,
    pub reading: ActuatorReading,
    pub points: Vec<(Point2<f64>, Descriptor)>,
}

/// Assembles the scene map from keyframe landmarks and the bundle solution
/// (`solution` indices follow `keyframes`).
pub fn build_scene_map(
    keyframes: &[KeyframeLandmarks],
    solution: &BundleSolution,
    pp: Point2<f64>,
    reference: usize,
    landmark_cov: Matrix2<f64>,
) -> Result<SceneMap, InitError> {
    if reference >= keyframes.len() {
        return Err(InitError::InvalidProblem(
            "reference keyframe out of range".into(),
        ));
    }
    let k_r = Intrinsics::new(solution.focals[reference], pp);
    let r_r = solution.rotations[reference];
    let mut views = Vec::with_capacity(keyframes.len());
    for (i, kf) in keyframes.iter().enumerate() {
        let k_k = Intrinsics::new(solution.focals[i], pp);
        let r_k = solution.rotations[i];
        let h_rk = compose_rotation_homography(&k_r, &r_r, &r_k, &k_k)?;
        let mut view = ViewMap::new(kf.id, kf.reading, h_rk, k_k, r_k);
        for (pos, desc) in &kf.points {
            view.push_landmark(Landmark {
                id: 0,
                pos: *pos,
                desc: desc.clone(),
                cov: landmark_cov,
                frames_seen: 0,
                frames_since_match: 0,
                born_at: 0,
                original: true,
            });
        }
        views.push(view);
    }
    let ref_view = views.remove(reference);
    let mut map = SceneMap::new(ref_view);
    for v in views {
        map.add_view(v);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_table_interpolates_in_log_space() {
        let t = FocalTable {
            zoom: vec![1.0, 2.0, 4.0],
            focal: vec![400.0, 800.0, 1800.0],
        };
        assert!((t.focal_at(1.0) - 400.0).abs() < 1e-9);
        assert!((t.focal_at(2.0f64.sqrt()) - 400.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((t.focal_at(4.0) - 1800.0).abs() < 1e-9);
        assert!((FocalTable::linear(500.0).focal_at(3.0) - 1500.0).abs() < 1e-12);
    }
}
