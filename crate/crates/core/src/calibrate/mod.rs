//! On-line pose estimation against the nearest view map, landmark EKF refinement
//! and birth–death map maintenance.

mod ekf;
mod lifecycle;
mod ransac;
mod refine;

pub use ekf::{ekf_update_landmark, measurement_covariance, GainForm, MeasurementNoise};
pub use lifecycle::{
    lifecycle_step, proximity_check, Candidate, CandidateSet, FrameEvidence, LifecycleConfig,
    LifecycleStats,
};
pub use ransac::{estimate_frame_homography, RansacConfig, RansacOutcome};
pub use refine::refine_rotation_homography;

pub use crate::scene_map::Observation;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    decompose_to_pose, homography_covariance, intrinsics_from_homography, CameraPose,
    GeometryError, Homography, Intrinsics, PointMatch,
};
use crate::scene_map::{
    match_sampled, sample_landmarks, to_point_matches, ActuatorReading, MapError, MatchConfig,
    RetrievalWeights, SceneMap,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrateError {
    #[error("only {found} inliers (need {required})")]
    InsufficientInliers { found: usize, required: usize },
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("no matched inliers")]
    NoInliers,
    #[error("map: {0}")]
    Map(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<MapError> for CalibrateError {
    fn from(e: MapError) -> Self {
        CalibrateError::Map(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub retrieval: RetrievalWeights,
    pub lifecycle: LifecycleConfig,
    pub gain_form: GainForm,
    /// EKF refinement, descriptor averaging and birth–death.
    pub map_updating: bool,
    /// Refit the RANSAC homography as a pure rotation with one focal length.
    pub rotation_refit: bool,
    /// Frame width and height, pixels.
    pub image_size: [f64; 2],
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            retrieval: RetrievalWeights::default(),
            lifecycle: LifecycleConfig::default(),
            gain_form: GainForm::default(),
            map_updating: true,
            rotation_refit: true,
            image_size: [640.0, 480.0],
        }
    }
}

/// Wall-clock seconds spent in each calibration stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTiming {
    pub matching: f64,
    pub estimation: f64,
    pub map_update: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub frame: u64,
    pub view_id: u32,
    /// Frame → nearest view map, with covariance when freshly estimated.
    pub h: Homography,
    /// Frame → reference keyframe.
    pub h_total: Homography,
    /// World plane → frame.
    pub g: Homography,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    pub inliers: Vec<PointMatch>,
    /// Observation indices consistent with `h`.
    pub inlier_obs: Vec<usize>,
    /// All remaining observation indices.
    pub outlier_obs: Vec<usize>,
    pub tentative_matches: usize,
    /// Pose carried over from an earlier frame because estimation failed.
    pub stale: bool,
    pub failure: Option<CalibrateError>,
    pub lifecycle: LifecycleStats,
    pub view_landmarks: usize,
    pub timing: CalibrationTiming,
}

/// Per-frame calibration state machine: owns candidate sets and the last good
/// result; the scene map is passed in by the single writer.
#[derive(Debug, Clone)]
pub struct Calibrator {
    pub config: CalibrationConfig,
    /// World plane registration `H_W` (reference keyframe → world plane).
    pub h_world: Homography,
    seed: u64,
    candidates: BTreeMap<u32, CandidateSet>,
    last_good: Option<CalibrationResult>,
}

struct Estimate {
    h: Homography,
    h_total: Homography,
    g: Homography,
    pose: CameraPose,
    intrinsics: Intrinsics,
}

impl Calibrator {
    pub fn new(config: CalibrationConfig, h_world: Homography, seed: u64) -> Self {
        Self {
            config,
            h_world,
            seed,
            candidates: BTreeMap::new(),
            last_good: None,
        }
    }

    pub fn last_good(&self) -> Option<&CalibrationResult> {
        self.last_good.as_ref()
    }

    fn frame_rng(&self, frame: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(frame);
        rng
    }

    fn chain(
        &self,
        h: Homography,
        h_rk: &Homography,
        k_r: &Intrinsics,
    ) -> Result<Estimate, CalibrateError> {
        let h_total = h_rk.compose(&h)?;
        let intrinsics = intrinsics_from_homography(&h_total, k_r)?;
        let pose = decompose_to_pose(&h_total, k_r, &intrinsics)?;
        let g = self.h_world.compose(&h_total)?.inverse()?;
        Ok(Estimate {
            h,
            h_total,
            g,
            pose,
            intrinsics,
        })
    }

    /// Pose and world mapping for one frame, followed by map maintenance.
    ///
    /// Estimation depends only on the frame and the current map. When it fails
    /// the previous good pose is reported flagged stale (or, before any success,
    /// the retrieved keyframe pose).
    pub fn calibrate_frame(
        &mut self,
        frame: u64,
        obs: &[Observation],
        reading: &ActuatorReading,
        map: &mut SceneMap,
    ) -> Result<CalibrationResult, CalibrateError> {
        let mut rng = self.frame_rng(frame);
        let mut timing = CalibrationTiming::default();
        let k_r = map.reference_view().intrinsics;

        let t0 = Instant::now();
        let view = map.nearest_view(reading, &self.config.retrieval)?;
        let view_id = view.id;
        let h_rk = view.h_rk.clone();
        let sampled = sample_landmarks(view, self.config.matching.sample_size, &mut rng);
        let dm = match_sampled(obs, view, &sampled, &self.config.matching, &mut rng);
        let pm = to_point_matches(&dm, obs, view);
        timing.matching = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let estimated =
            estimate_frame_homography(&pm, &self.config.ransac, &mut rng).and_then(|out| {
                let h = if self.config.rotation_refit {
                    let inl: Vec<PointMatch> = out.inliers.iter().map(|&i| pm[i].clone()).collect();
                    let h = refine_rotation_homography(&out.homography, &h_rk, &k_r, &inl)?;
                    let cov = homography_covariance(&h, &inl)?;
                    h.with_covariance(cov)
                } else {
                    out.homography
                };
                Ok((self.chain(h, &h_rk, &k_r)?, out.inliers))
            });
        timing.estimation = t1.elapsed().as_secs_f64();

        let (est, inlier_idx) = match estimated {
            Ok(v) => v,
            Err(e) => {
                let view_landmarks = map.view(view_id).map_or(0, |v| v.landmarks.len());
                let mut r = match &self.last_good {
                    Some(prev) => prev.clone(),
                    None => {
                        let est = self.chain(Homography::identity(), &h_rk, &k_r)?;
                        CalibrationResult {
                            frame,
                            view_id,
                            h: est.h,
                            h_total: est.h_total,
                            g: est.g,
                            pose: est.pose,
                            intrinsics: est.intrinsics,
                            inliers: Vec::new(),
                            inlier_obs: Vec::new(),
                            outlier_obs: Vec::new(),
                            tentative_matches: 0,
                            stale: true,
                            failure: None,
                            lifecycle: LifecycleStats::default(),
                            view_landmarks,
                            timing,
                        }
                    }
                };
                r.frame = frame;
                r.inliers.clear();
                r.inlier_obs.clear();
                r.outlier_obs = (0..obs.len()).collect();
                r.tentative_matches = dm.len();
                r.stale = true;
                r.failure = Some(e);
                r.lifecycle = LifecycleStats::default();
                r.view_landmarks = view_landmarks;
                r.timing = timing;
                return Ok(r);
            }
        };

        let inlier_dm: Vec<_> = inlier_idx.iter().map(|&i| dm[i]).collect();
        let inliers: Vec<PointMatch> = inlier_idx.iter().map(|&i| pm[i].clone()).collect();
        let mut is_inlier = vec![false; obs.len()];
        for m in &inlier_dm {
            is_inlier[m.obs] = true;
        }
        let inlier_obs: Vec<usize> = inlier_dm.iter().map(|m| m.obs).collect();
        let outlier_obs: Vec<usize> = (0..obs.len()).filter(|&i| !is_inlier[i]).collect();

        let t2 = Instant::now();
        let mut lifecycle = LifecycleStats::default();
        if self.config.map_updating {
            let view = map
                .view_mut(view_id)
                .ok_or(MapError::UnknownView(view_id))?;
            for (m, pmatch) in inlier_dm.iter().zip(&inliers) {
                let lm = &mut view.landmarks[m.landmark];
                let Ok(noise) = measurement_covariance(pmatch, &est.h, &lm.cov) else {
                    continue;
                };
                // A singular update leaves the landmark as it was.
                let _ = ekf_update_landmark(
                    &mut lm.pos,
                    &mut lm.cov,
                    &pmatch.src,
                    &est.h,
                    &noise.total,
                    self.config.gain_form,
                );
            }
            let cands = self.candidates.entry(view_id).or_default();
            let ev = FrameEvidence {
                frame,
                h: &est.h,
                obs,
                inliers: &inlier_dm,
                sampled: &sampled,
                image_size: self.config.image_size,
            };
            lifecycle = lifecycle_step(view, cands, &ev, &self.config.lifecycle);
        }
        timing.map_update = t2.elapsed().as_secs_f64();

        let result = CalibrationResult {
            frame,
            view_id,
            h: est.h,
            h_total: est.h_total,
            g: est.g,
            pose: est.pose,
            intrinsics: est.intrinsics,
            inliers,
            inlier_obs,
            outlier_obs,
            tentative_matches: dm.len(),
            stale: false,
            failure: None,
            lifecycle,
            view_landmarks: map.view(view_id).map_or(0, |v| v.landmarks.len()),
            timing,
        };
        self.last_good = Some(result.clone());
        Ok(result)
    }
}
