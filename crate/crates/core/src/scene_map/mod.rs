//! View maps, landmarks and keyframe retrieval.

mod io;
mod kdforest;
mod matching;

pub use io::{deserialize_map, serialize_map, MAP_MAGIC, MAP_VERSION};
pub use kdforest::KdForest;
pub use matching::{
    descriptor_distance, match_descriptors, match_sampled, sample_landmarks, to_point_matches,
    update_descriptor, DescriptorMatch, MatchConfig, BRUTE_FORCE_LIMIT,
};

use std::sync::{Arc, RwLock};

use nalgebra::{Matrix2, Matrix3, Point2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{default_keypoint_cov, Homography, Intrinsics};

/// Fixed-length appearance descriptor.
pub type Descriptor = Vec<f32>;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("scene map has no views")]
    EmptyMap,
    #[error("descriptor length mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported map version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt map payload: {0}")]
    CorruptPayload(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no view with id {0}")]
    UnknownView(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A background keypoint stored in its view map's keyframe frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    pub pos: Point2<f64>,
    pub desc: Descriptor,
    /// Position covariance, pixels².
    pub cov: Matrix2<f64>,
    pub frames_seen: u32,
    pub frames_since_match: u32,
    pub born_at: u64,
    /// Present since map initialization.
    pub original: bool,
}

/// Keypoint detected in the current frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pos: Point2<f64>,
    pub desc: Descriptor,
    /// Localization covariance, pixels².
    pub cov: Matrix2<f64>,
}

impl Observation {
    pub fn new(pos: Point2<f64>, desc: Descriptor) -> Self {
        Self {
            pos,
            desc,
            cov: default_keypoint_cov(),
        }
    }

    pub fn with_cov(mut self, cov: Matrix2<f64>) -> Self {
        self.cov = cov;
        self
    }
}

/// Motor-reported pan/tilt (degrees) and zoom (magnification, ≥ 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorReading {
    pub pan_deg: f64,
    pub tilt_deg: f64,
    pub zoom: f64,
}

impl ActuatorReading {
    pub fn new(pan_deg: f64, tilt_deg: f64, zoom: f64) -> Self {
        Self {
            pan_deg,
            tilt_deg,
            zoom,
        }
    }
}

/// Weights of the keyframe-retrieval distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalWeights {
    pub pan_tilt: f64,
    pub log2_zoom: f64,
}

impl Default for RetrievalWeights {
    fn default() -> Self {
        Self {
            pan_tilt: 1.0,
            log2_zoom: 10.0,
        }
    }
}

impl RetrievalWeights {
    pub fn distance(&self, a: &ActuatorReading, b: &ActuatorReading) -> f64 {
        let mut dpan = (a.pan_deg - b.pan_deg) % 360.0;
        if dpan > 180.0 {
            dpan -= 360.0;
        } else if dpan < -180.0 {
            dpan += 360.0;
        }
        let dtilt = a.tilt_deg - b.tilt_deg;
        let dzoom = a.zoom.max(1e-12).log2() - b.zoom.max(1e-12).log2();
        ((self.pan_tilt * dpan).powi(2)
            + (self.pan_tilt * dtilt).powi(2)
            + (self.log2_zoom * dzoom).powi(2))
        .sqrt()
    }
}

/// Landmarks of one keyframe plus its registration to the reference keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMap {
    pub id: u32,
    pub key: ActuatorReading,
    pub landmarks: Vec<Landmark>,
    /// Keyframe → reference keyframe.
    pub h_rk: Homography,
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub next_landmark_id: u64,
}

impl ViewMap {
    pub fn new(
        id: u32,
        key: ActuatorReading,
        h_rk: Homography,
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
    ) -> Self {
        Self {
            id,
            key,
            landmarks: Vec::new(),
            h_rk,
            intrinsics,
            rotation,
            next_landmark_id: 0,
        }
    }

    /// Appends a landmark with a fresh id and returns that id.
    pub fn push_landmark(&mut self, mut lm: Landmark) -> u64 {
        lm.id = self.next_landmark_id;
        self.next_landmark_id += 1;
        let id = lm.id;
        self.landmarks.push(lm);
        id
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        self.landmarks.first().map(|l| l.desc.len())
    }

    pub fn original_count(&self) -> usize {
        self.landmarks.iter().filter(|l| l.original).count()
    }
}

/// Union of all view maps. Views are shared so that readers holding an older
/// snapshot keep a consistent copy while the writer edits one view.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMap {
    pub views: Vec<Arc<ViewMap>>,
    pub reference: u32,
}

impl SceneMap {
    pub fn new(reference: ViewMap) -> Self {
        let id = reference.id;
        Self {
            views: vec![Arc::new(reference)],
            reference: id,
        }
    }

    pub fn add_view(&mut self, view: ViewMap) {
        self.views.push(Arc::new(view));
    }

    pub fn view(&self, id: u32) -> Option<&ViewMap> {
        self.views.iter().find(|v| v.id == id).map(|v| v.as_ref())
    }

    /// Mutable access, cloning the view first if a snapshot still shares it.
    pub fn view_mut(&mut self, id: u32) -> Option<&mut ViewMap> {
        self.views
            .iter_mut()
            .find(|v| v.id == id)
            .map(Arc::make_mut)
    }

    pub fn reference_view(&self) -> &ViewMap {
        self.view(self.reference).expect("reference view present")
    }

    pub fn landmark_count(&self) -> usize {
        self.views.iter().map(|v| v.landmarks.len()).sum()
    }

    /// View minimizing the weighted actuator distance; ties go to the lowest id.
    pub fn nearest_view(
        &self,
        reading: &ActuatorReading,
        weights: &RetrievalWeights,
    ) -> Result<&ViewMap, MapError> {
        let mut best: Option<(&ViewMap, f64)> = None;
        for v in &self.views {
            let d = weights.distance(&v.key, reading);
            best = match best {
                Some((bv, bd)) if bd < d || (bd == d && bv.id < v.id) => Some((bv, bd)),
                _ => Some((v.as_ref(), d)),
            };
        }
        best.map(|(v, _)| v).ok_or(MapError::EmptyMap)
    }
}

/// Single-writer, many-reader holder of the current map.
///
/// Readers take an `Arc` snapshot; the writer publishes a new snapshot once per
/// frame. Unmodified views are shared between snapshots.
#[derive(Debug)]
pub struct SharedSceneMap {
    current: RwLock<Arc<SceneMap>>,
}

impl SharedSceneMap {
    pub fn new(map: SceneMap) -> Self {
        Self {
            current: RwLock::new(Arc::new(map)),
        }
    }

    pub fn snapshot(&self) -> Arc<SceneMap> {
        self.current.read().expect("map lock poisoned").clone()
    }

    pub fn publish(&self, map: SceneMap) {
        *self.current.write().expect("map lock poisoned") = Arc::new(map);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(id: u32, pan: f64, tilt: f64, zoom: f64) -> ViewMap {
        ViewMap::new(
            id,
            ActuatorReading::new(pan, tilt, zoom),
            Homography::identity(),
            Intrinsics::new(800.0, Point2::new(320.0, 240.0)),
            Matrix3::identity(),
        )
    }

    fn grid_map() -> SceneMap {
        let mut m = SceneMap::new(view(0, 0.0, 0.0, 1.0));
        m.add_view(view(1, 10.0, 0.0, 1.0));
        m.add_view(view(2, 0.0, -10.0, 1.0));
        m.add_view(view(3, 0.0, 0.0, 2.0));
        m
    }

    #[test]
    fn exact_key_selects_view() {
        let m = grid_map();
        let w = RetrievalWeights::default();
        for v in &m.views {
            assert_eq!(m.nearest_view(&v.key, &w).unwrap().id, v.id);
        }
    }

    #[test]
    fn midway_tie_goes_to_lowest_id() {
        let m = grid_map();
        let r = ActuatorReading::new(5.0, 0.0, 1.0);
        assert_eq!(
            m.nearest_view(&r, &RetrievalWeights::default()).unwrap().id,
            0
        );
    }

    #[test]
    fn zoom_mismatch_dominates() {
        let m = grid_map();
        // 0.5 log2 units of zoom cost more than 4 degrees of pan.
        let r = ActuatorReading::new(0.0, 0.0, 1.45);
        assert_eq!(
            m.nearest_view(&r, &RetrievalWeights::default()).unwrap().id,
            3
        );
    }

    #[test]
    fn pan_distance_wraps() {
        let w = RetrievalWeights::default();
        let d = w.distance(
            &ActuatorReading::new(179.0, 0.0, 1.0),
            &ActuatorReading::new(-179.0, 0.0, 1.0),
        );
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_map_errors() {
        let mut m = grid_map();
        m.views.clear();
        assert!(matches!(
            m.nearest_view(
                &ActuatorReading::new(0.0, 0.0, 1.0),
                &RetrievalWeights::default()
            ),
            Err(MapError::EmptyMap)
        ));
    }

    #[test]
    fn snapshots_are_isolated_from_writer() {
        let shared = SharedSceneMap::new(grid_map());
        let before = shared.snapshot();
        let mut next = (*before).clone();
        next.view_mut(1).unwrap().key.pan_deg = 42.0;
        shared.publish(next);
        assert_eq!(before.view(1).unwrap().key.pan_deg, 10.0);
        assert_eq!(shared.snapshot().view(1).unwrap().key.pan_deg, 42.0);
        // untouched views are still shared
        assert!(Arc::ptr_eq(&before.views[0], &shared.snapshot().views[0]));
    }
}
