//! End-to-end wiring: simulated keyframes → bundle adjustment → world
//! registration, then the per-frame calibrate → detect → track loop, in
//! sequential or pipelined execution.

mod detector;
mod experiments;

pub use detector::DetectorFilter;
pub use experiments::{
    scale_probe, sweep, ScaleProbe, ScaleProbePoint, ScaleProbeRecord, SweepAxis, SweepRecord,
};

use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::Instant;

use nalgebra::{Matrix2, Matrix3, Point2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{
    estimate_frame_homography, CalibrateError, CalibrationConfig, CalibrationResult, Calibrator,
};
use crate::geometry::{decompose_to_pose, GeometryError, Homography, Intrinsics};
use crate::metrics::{
    calib_errors, clear_mot, BoxRecord, FrameEvents, Grid, MetricsError, MotReport,
};
use crate::offline_init::{
    build_scene_map, bundle_adjust, merge_captures, BundleConfig, BundleProblem, BundleSolution,
    BundleView, FocalTable, InitError, KeyframeCapture, KeyframeLandmarks, ViewPairMatches,
    WorldRegistration,
};
use crate::scene_map::{
    match_descriptors, to_point_matches, Landmark, MatchConfig, SceneMap, ViewMap,
};
use crate::simulator::{RenderedFrame, SimError, Simulator};
use crate::tracker::{Detection, FrameInput, TrackRecord, Tracker, TrackerConfig, TrackingMode};
use crate::worldproj::{build_homology, calibrate_mu, LineConvention, WorldError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("initialization: {0}")]
    Init(#[from] InitError),
    #[error("calibration: {0}")]
    Calibrate(#[from] CalibrateError),
    #[error("world projection: {0}")]
    World(#[from] WorldError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Sequential,
    /// Frame generation, calibration and tracking on separate threads joined
    /// by bounded queues.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub calibration: CalibrationConfig,
    pub tracker: TrackerConfig,
    pub detector: DetectorFilter,
    pub bundle: BundleConfig,
    pub capture: KeyframeCapture,
    pub line_convention: LineConvention,
    /// Height of the person used to calibrate the homology, meters.
    pub person_height_m: f64,
    /// Keypoint σ assigned to initial landmarks, pixels.
    pub landmark_sigma_px: f64,
    /// Minimum RANSAC inliers for a keyframe pair to enter the bundle.
    pub min_pair_inliers: usize,
    pub execution: Execution,
    pub queue_capacity: usize,
    /// Spacing of the reprojection-error grid, pixels.
    pub grid_spacing_px: f64,
    pub voc_threshold: f64,
    /// Seed of the algorithm's own random streams (sampling, RANSAC).
    pub seed: u64,
    /// Calibration failure fraction above which a run is reported as failed.
    pub max_failure_rate: f64,
    /// Process only the first frames of the scenario.
    pub frames: Option<u64>,
    pub tracking: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            calibration: CalibrationConfig::default(),
            tracker: TrackerConfig::default(),
            detector: DetectorFilter::default(),
            bundle: BundleConfig::default(),
            capture: KeyframeCapture::default(),
            line_convention: LineConvention::default(),
            person_height_m: 1.8,
            landmark_sigma_px: 1.0,
            min_pair_inliers: 30,
            execution: Execution::Sequential,
            queue_capacity: 4,
            grid_spacing_px: 32.0,
            voc_threshold: 0.5,
            seed: 0,
            max_failure_rate: 0.25,
            frames: None,
            tracking: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.calibration.matching.sample_size == 0 {
            return bad("landmark sample size must be positive");
        }
        if !(self.calibration.ransac.threshold_px > 0.0) {
            return bad("RANSAC threshold must be positive");
        }
        if self.queue_capacity == 0 {
            return bad("queue capacity must be positive");
        }
        if !(self.grid_spacing_px >= 1.0) || !(0.0..=1.0).contains(&self.voc_threshold) {
            return bad("grid spacing or VOC threshold out of range");
        }
        if !(self.person_height_m > 0.0) {
            return bad("person height must be positive");
        }
        if self.capture.captures == 0
            || !(self.capture.radius_px > 0.0)
            || !(0.0..=1.0).contains(&self.capture.min_fraction)
        {
            return bad("keyframe capture settings out of range");
        }
        Ok(())
    }
}

/// Off-line initialization products.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub map: SceneMap,
    pub bundle: BundleSolution,
    pub registration: WorldRegistration,
    pub mu: f64,
    /// `(keyframe a, keyframe b, RANSAC inliers)` of every bundled pair.
    pub pairs: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InitReport {
    pub keyframes: usize,
    pub pairs: Vec<(usize, usize, usize)>,
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    pub iterations: usize,
    pub converged: bool,
    pub focals: Vec<f64>,
    pub true_focals: Vec<f64>,
    pub mu: f64,
    pub landmarks: usize,
}

impl Initialization {
    pub fn report(&self, sim: &Simulator) -> InitReport {
        InitReport {
            keyframes: self.bundle.focals.len(),
            pairs: self.pairs.clone(),
            initial_rms_px: self.bundle.initial_rms,
            final_rms_px: self.bundle.rms,
            iterations: self.bundle.iterations,
            converged: self.bundle.converged,
            focals: self.bundle.focals.clone(),
            true_focals: sim
                .scenario()
                .keyframes
                .poses()
                .iter()
                .map(|p| p.2)
                .collect(),
            mu: self.mu,
            landmarks: self.map.landmark_count(),
        }
    }
}

fn keyframe_view(kf: &KeyframeLandmarks, pp: Point2<f64>) -> ViewMap {
    let mut v = ViewMap::new(
        kf.id,
        kf.reading,
        Homography::identity(),
        Intrinsics::new(1.0, pp),
        Matrix3::identity(),
    );
    for (pos, desc) in &kf.points {
        v.push_landmark(Landmark {
            id: 0,
            pos: *pos,
            desc: desc.clone(),
            cov: Matrix2::identity(),
            frames_seen: 0,
            frames_since_match: 0,
            born_at: 0,
            original: true,
        });
    }
    v
}

/// Keyframe capture, pairwise matching, bundle adjustment, scene-map assembly,
/// world registration and homology calibration.
pub fn initialize(sim: &Simulator, config: &RunConfig) -> Result<Initialization> {
    config.validate()?;
    let scenario = sim.scenario();
    let pp = sim.principal_point();
    let reference = scenario.keyframes.reference_index();
    let mut rendered = Vec::with_capacity(sim.keyframe_count());
    for i in 0..sim.keyframe_count() {
        let mut first = sim.render_keyframe(i)?;
        let mut captures = vec![std::mem::take(&mut first.observations)];
        for c in 1..config.capture.captures as u64 {
            captures.push(sim.render_keyframe_capture(i, c)?.observations);
        }
        first.observations = merge_captures(&captures, &config.capture);
        rendered.push(first);
    }
    let keyframes: Vec<KeyframeLandmarks> = rendered
        .iter()
        .map(|k| KeyframeLandmarks {
            id: k.index as u32,
            reading: k.reading,
            points: k
                .observations
                .iter()
                .map(|o| (o.pos, o.desc.clone()))
                .collect(),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let all = MatchConfig {
        sample_size: usize::MAX,
        ..config.calibration.matching
    };
    let mut pairs = Vec::new();
    let mut summary = Vec::new();
    for a in 0..keyframes.len() {
        for b in a + 1..keyframes.len() {
            let view_b = keyframe_view(&keyframes[b], pp);
            let dm = match_descriptors(&rendered[a].observations, &view_b, &all, &mut rng);
            let pm = to_point_matches(&dm, &rendered[a].observations, &view_b);
            let Ok(out) = estimate_frame_homography(&pm, &config.calibration.ransac, &mut rng)
            else {
                continue;
            };
            if out.inliers.len() < config.min_pair_inliers {
                continue;
            }
            summary.push((a, b, out.inliers.len()));
            pairs.push(ViewPairMatches {
                a,
                b,
                matches: out.inliers.iter().map(|&i| pm[i].clone()).collect(),
            });
        }
    }
    let problem = BundleProblem {
        views: keyframes
            .iter()
            .map(|k| BundleView {
                id: k.id,
                reading: k.reading,
            })
            .collect(),
        pairs,
        pp,
        reference,
    };
    let table = FocalTable::linear(scenario.camera.base_focal);
    let bundle = bundle_adjust(&problem, &table, &config.bundle)?;
    let samples = config.capture.min_count().min(config.capture.captures) as f64;
    let cov = Matrix2::identity() * config.landmark_sigma_px.powi(2) / samples;
    let map = build_scene_map(&keyframes, &bundle, pp, reference, cov)?;

    let reg = sim.registration_inputs();
    let k_r = map.reference_view().intrinsics;
    let registration = WorldRegistration::new(reg.vanishing, &k_r, reg.anchors, reg.length_m)?;
    let (foot, head) = sim.reference_person(&pp, config.person_height_m)?;
    let g_ref = registration.h_w.inverse()?;
    let mu = calibrate_mu(&g_ref, &k_r, &foot, &head, config.line_convention)?;
    Ok(Initialization {
        map,
        bundle,
        registration,
        mu,
        pairs: summary,
    })
}

/// Per-frame calibration diagnostics against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: u64,
    pub view_id: u32,
    pub tentative_matches: usize,
    pub inliers: usize,
    pub stale: bool,
    pub failed: bool,
    pub births: usize,
    pub deaths: usize,
    pub view_landmarks: usize,
    pub pan_err_deg: f64,
    pub tilt_err_deg: f64,
    pub focal_err_pct: f64,
    pub reproj_px: f64,
    pub est_focal: f64,
    pub true_focal: f64,
    pub detections: usize,
    pub accepted_detections: usize,
}

/// Mean wall-clock milliseconds per frame of each stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    /// Simulated image acquisition, keypoint and person detection.
    pub acquisition: f64,
    pub matching: f64,
    pub estimation: f64,
    pub map_update: f64,
    /// Homology construction and detection filtering.
    pub world_projection: f64,
    pub tracking: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.acquisition
            + self.matching
            + self.estimation
            + self.map_update
            + self.world_projection
            + self.tracking
    }

    fn add(&mut self, o: &StageTimes) {
        self.acquisition += o.acquisition;
        self.matching += o.matching;
        self.estimation += o.estimation;
        self.map_update += o.map_update;
        self.world_projection += o.world_projection;
        self.tracking += o.tracking;
    }

    fn scaled(&self, k: f64) -> StageTimes {
        StageTimes {
            acquisition: self.acquisition * k,
            matching: self.matching * k,
            estimation: self.estimation * k,
            map_update: self.map_update * k,
            world_projection: self.world_projection * k,
            tracking: self.tracking * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub execution: Execution,
    pub frames: u64,
    pub stages_ms: StageTimes,
    /// Sum of the per-stage means.
    pub stage_sum_ms: f64,
    /// Wall-clock milliseconds per frame of the whole run.
    pub wall_ms_per_frame: f64,
    pub fps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub frames: u64,
    pub failure_rate: f64,
    pub stale_rate: f64,
    pub mean_reproj_px: f64,
    pub mean_pan_err_deg: f64,
    pub mean_tilt_err_deg: f64,
    pub mean_focal_err_pct: f64,
}

impl CalibrationSummary {
    pub fn from_diagnostics(d: &[FrameDiagnostics]) -> Self {
        let n = d.len().max(1) as f64;
        let mean = |f: fn(&FrameDiagnostics) -> f64| d.iter().map(f).sum::<f64>() / n;
        Self {
            frames: d.len() as u64,
            failure_rate: d.iter().filter(|x| x.failed).count() as f64 / n,
            stale_rate: d.iter().filter(|x| x.stale).count() as f64 / n,
            mean_reproj_px: mean(|x| x.reproj_px),
            mean_pan_err_deg: mean(|x| x.pan_err_deg),
            mean_tilt_err_deg: mean(|x| x.tilt_err_deg),
            mean_focal_err_pct: mean(|x| x.focal_err_pct),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub diagnostics: Vec<FrameDiagnostics>,
    pub trajectories: Vec<TrackRecord>,
    pub ground_truth: Vec<BoxRecord>,
    pub timings: TimingReport,
    pub calibration: CalibrationSummary,
}

impl RunOutput {
    pub fn evaluate(&self, voc_threshold: f64) -> Result<(MotReport, Vec<FrameEvents>)> {
        let hyp: Vec<BoxRecord> = self
            .trajectories
            .iter()
            .filter_map(BoxRecord::from_track)
            .collect();
        Ok(clear_mot(
            &self.ground_truth,
            &hyp,
            self.diagnostics.len() as u64,
            voc_threshold,
        )?)
    }
}

struct Calibrated {
    frame: RenderedFrame,
    result: CalibrationResult,
    diag: FrameDiagnostics,
    times: StageTimes,
}

struct CalibrationStage<'a> {
    sim: &'a Simulator,
    calibrator: Calibrator,
    map: SceneMap,
    grid: Grid,
}

impl CalibrationStage<'_> {
    fn process(&mut self, frame: RenderedFrame, mut times: StageTimes) -> Result<Calibrated> {
        let result = self.calibrator.calibrate_frame(
            frame.frame,
            &frame.observations,
            &frame.reading,
            &mut self.map,
        )?;
        times.matching = result.timing.matching * 1e3;
        times.estimation = result.timing.estimation * 1e3;
        times.map_update = result.timing.map_update * 1e3;
        let truth = &frame.truth;
        let k_r = self.sim.reference_intrinsics();
        let true_pose = decompose_to_pose(&truth.h_total, &k_r, &truth.intrinsics)?;
        let err = calib_errors(
            &result.pose,
            &result.h_total,
            &true_pose,
            &truth.h_total,
            &self.grid,
        )?;
        let diag = FrameDiagnostics {
            frame: frame.frame,
            view_id: result.view_id,
            tentative_matches: result.tentative_matches,
            inliers: result.inliers.len(),
            stale: result.stale,
            failed: result.failure.is_some(),
            births: result.lifecycle.births,
            deaths: result.lifecycle.deaths,
            view_landmarks: result.view_landmarks,
            pan_err_deg: err.pan,
            tilt_err_deg: err.tilt,
            focal_err_pct: err.focal,
            reproj_px: err.reproj,
            est_focal: result.intrinsics.focal,
            true_focal: truth.intrinsics.focal,
            detections: frame.detections.len(),
            accepted_detections: 0,
        };
        Ok(Calibrated {
            frame,
            result,
            diag,
            times,
        })
    }
}

struct TrackingStage {
    tracker: Tracker,
    filter: DetectorFilter,
    mu: f64,
    convention: LineConvention,
    enabled: bool,
    trajectories: Vec<TrackRecord>,
    ground_truth: Vec<BoxRecord>,
    diagnostics: Vec<FrameDiagnostics>,
    times: StageTimes,
}

impl TrackingStage {
    fn process(&mut self, c: Calibrated) {
        let Calibrated {
            frame,
            result,
            mut diag,
            mut times,
        } = c;
        for t in frame.truth.targets.iter().filter(|t| t.in_view) {
            self.ground_truth.push(BoxRecord {
                frame: frame.frame,
                id: t.id as u64,
                x: t.foot_px.x,
                y: t.foot_px.y,
                height: (t.head_px - t.foot_px).norm(),
            });
        }
        if self.enabled {
            let t0 = Instant::now();
            let world = self.tracker.config.mode == TrackingMode::World;
            let homology = world
                .then(|| {
                    build_homology(&result.g, &result.intrinsics, self.mu, self.convention).ok()
                })
                .flatten();
            let dt = self.tracker.dt_to(frame.time);
            let accepted: Vec<Detection> = if world {
                frame
                    .detections
                    .iter()
                    .filter(|d| self.filter.accept_world(d, homology.as_ref()))
                    .copied()
                    .collect()
            } else {
                let feet = self.tracker.predicted_feet(None, dt);
                frame
                    .detections
                    .iter()
                    .filter(|d| self.filter.accept_image(d, &feet))
                    .copied()
                    .collect()
            };
            diag.accepted_detections = accepted.len();
            times.world_projection = t0.elapsed().as_secs_f64() * 1e3;

            let t1 = Instant::now();
            let input = FrameInput {
                frame: frame.frame,
                time: frame.time,
                g: world.then_some(&result.g),
                homology: homology.as_ref(),
                stale: result.stale,
                detections: &accepted,
            };
            self.trajectories.extend(self.tracker.step(&input));
            times.tracking = t1.elapsed().as_secs_f64() * 1e3;
        }
        self.times.add(&times);
        self.diagnostics.push(diag);
    }
}

fn acquire(sim: &Simulator, frame: u64) -> Result<(RenderedFrame, StageTimes)> {
    let t0 = Instant::now();
    let f = sim.render_frame(frame)?;
    let times = StageTimes {
        acquisition: t0.elapsed().as_secs_f64() * 1e3,
        ..Default::default()
    };
    Ok((f, times))
}

/// Runs the on-line loop over the scenario. Both execution modes process
/// frames in order and produce identical outputs apart from timings.
pub fn run(sim: &Simulator, init: &Initialization, config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let frames = config.frames.unwrap_or(u64::MAX).min(sim.scenario().frames);
    let mut calibration_config = config.calibration;
    calibration_config.image_size = sim.scenario().camera.image_size;
    let mut calib = CalibrationStage {
        sim,
        calibrator: Calibrator::new(
            calibration_config,
            init.registration.h_w.clone(),
            config.seed,
        ),
        map: init.map.clone(),
        grid: Grid::new(sim.scenario().camera.image_size, config.grid_spacing_px),
    };
    let mut track = TrackingStage {
        tracker: Tracker::new(config.tracker),
        filter: config.detector,
        mu: init.mu,
        convention: config.line_convention,
        enabled: config.tracking,
        trajectories: Vec::new(),
        ground_truth: Vec::new(),
        diagnostics: Vec::with_capacity(frames as usize),
        times: StageTimes::default(),
    };

    let start = Instant::now();
    match config.execution {
        Execution::Sequential => {
            for f in 0..frames {
                let (frame, times) = acquire(sim, f)?;
                track.process(calib.process(frame, times)?);
            }
        }
        Execution::Parallel => {
            let cap = config.queue_capacity;
            let (tx_frames, rx_frames) = sync_channel::<(RenderedFrame, StageTimes)>(cap);
            let (tx_calib, rx_calib) = sync_channel::<Calibrated>(cap);
            let outcome: Result<()> = thread::scope(|s| {
                let producer = s.spawn(move || -> Result<()> {
                    for f in 0..frames {
                        if tx_frames.send(acquire(sim, f)?).is_err() {
                            break;
                        }
                    }
                    Ok(())
                });
                let calib_ref = &mut calib;
                let calibrator = s.spawn(move || -> Result<()> {
                    for (frame, times) in rx_frames {
                        if tx_calib.send(calib_ref.process(frame, times)?).is_err() {
                            break;
                        }
                    }
                    Ok(())
                });
                for c in rx_calib {
                    track.process(c);
                }
                producer.join().expect("acquisition thread panicked")?;
                calibrator.join().expect("calibration thread panicked")?;
                Ok(())
            });
            outcome?;
        }
    }
    let wall = start.elapsed().as_secs_f64() * 1e3;
    let n = track.diagnostics.len().max(1) as f64;
    let stages_ms = track.times.scaled(1.0 / n);
    let wall_ms_per_frame = wall / n;
    Ok(RunOutput {
        calibration: CalibrationSummary::from_diagnostics(&track.diagnostics),
        diagnostics: track.diagnostics,
        trajectories: track.trajectories,
        ground_truth: track.ground_truth,
        timings: TimingReport {
            execution: config.execution,
            frames,
            stage_sum_ms: stages_ms.total(),
            stages_ms,
            wall_ms_per_frame,
            fps: 1e3 / wall_ms_per_frame.max(1e-9),
        },
    })
}
