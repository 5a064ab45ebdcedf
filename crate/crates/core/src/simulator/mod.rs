//! Deterministic synthetic PTZ scene: a rotating, zooming pinhole camera over a
//! planar world, background landmarks on the viewing sphere, scene-change
//! events, moving targets and a detector model.
//!
//! Background landmarks are directions in the rig frame, so every view of them
//! is related by an exact rotation homography. Every random draw comes from a
//! ChaCha stream keyed by the scenario seed and the frame index.

mod scenario;

pub use scenario::{
    CameraRig, ClutterObject, DetectorModel, Event, KeyframeGrid, LandmarkField, LandmarkLevel,
    NoiseModel, Scenario, TargetSpec, Trajectory, Waypoint,
};

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_from_pan_tilt, CameraPose, GeometryError, Homography, Intrinsics};
use crate::scene_map::{ActuatorReading, Descriptor, Observation};
use crate::tracker::Detection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("frame {0} is outside the scenario")]
    FrameOutOfRange(u64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

const CELL_DEG: f64 = 2.0;
const STREAM_FIELD: u64 = u64::MAX;
const STREAM_TARGETS: u64 = u64::MAX - 1;
const STREAM_EVENTS: u64 = u64::MAX - 2;
const STREAM_KEYFRAMES: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldLandmark {
    pub id: u64,
    /// Unit direction in the rig frame.
    pub dir: Vector3<f64>,
    pub level_focal: f64,
    pub desc: Vec<f32>,
    pub drift_dir: Vec<f32>,
    pub born: u64,
    pub died: Option<u64>,
}

impl WorldLandmark {
    pub fn alive_at(&self, frame: u64) -> bool {
        self.born <= frame && self.died.is_none_or(|d| frame < d)
    }

    pub fn descriptor_at(&self, frame: u64, rate: f64) -> Vec<f32> {
        let k = (rate * frame as f64) as f32;
        self.desc
            .iter()
            .zip(&self.drift_dir)
            .map(|(d, u)| d + k * u)
            .collect()
    }
}

/// Ground-truth state of one target in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    pub id: u32,
    pub world: Point2<f64>,
    /// Meters per second.
    pub velocity: [f64; 2],
    pub foot_px: Point2<f64>,
    pub head_px: Point2<f64>,
    pub in_view: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    /// Absolute pan and tilt of the rig, radians, and focal length.
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    /// Frame → reference keyframe image.
    pub h_total: Homography,
    /// World plane → frame.
    pub g: Homography,
    /// World landmark id of each observation, `None` for clutter.
    pub obs_landmarks: Vec<Option<u64>>,
    /// Target index of each detection, `None` for false alarms.
    pub det_targets: Vec<Option<u32>>,
    pub targets: Vec<TargetTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedFrame {
    pub frame: u64,
    /// Seconds.
    pub time: f64,
    pub observations: Vec<Observation>,
    pub detections: Vec<Detection>,
    pub reading: ActuatorReading,
    pub truth: FrameTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedKeyframe {
    pub index: usize,
    pub observations: Vec<Observation>,
    pub reading: ActuatorReading,
    pub truth: FrameTruth,
}

/// Inputs of the world-plane registration measured in the reference keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationInputs {
    /// Vanishing points of world X and world Y.
    pub vanishing: [Vector3<f64>; 2],
    /// Images of the world origin and of `(length, 0)`.
    pub anchors: [Point2<f64>; 2],
    pub length_m: f64,
}

struct AzElGrid {
    az0: i64,
    el0: i64,
    n_az: usize,
    n_el: usize,
    cells: Vec<Vec<usize>>,
}

impl AzElGrid {
    fn cell_of(az: f64, el: f64) -> (i64, i64) {
        (
            (az.to_degrees() / CELL_DEG).floor() as i64,
            (el.to_degrees() / CELL_DEG).floor() as i64,
        )
    }

    fn build(landmarks: &[WorldLandmark]) -> Self {
        let keys: Vec<(i64, i64)> = landmarks
            .iter()
            .map(|l| {
                let (az, el) = az_el(&l.dir);
                Self::cell_of(az, el)
            })
            .collect();
        let az0 = keys.iter().map(|k| k.0).min().unwrap_or(0);
        let el0 = keys.iter().map(|k| k.1).min().unwrap_or(0);
        let n_az = keys
            .iter()
            .map(|k| (k.0 - az0) as usize + 1)
            .max()
            .unwrap_or(1);
        let n_el = keys
            .iter()
            .map(|k| (k.1 - el0) as usize + 1)
            .max()
            .unwrap_or(1);
        let mut cells = vec![Vec::new(); n_az * n_el];
        for (i, k) in keys.iter().enumerate() {
            cells[(k.0 - az0) as usize * n_el + (k.1 - el0) as usize].push(i);
        }
        Self {
            az0,
            el0,
            n_az,
            n_el,
            cells,
        }
    }

    /// Landmark indices in the cells overlapping the given az/el box, ascending.
    fn query(&self, az: [f64; 2], el: [f64; 2]) -> Vec<usize> {
        let (a0, e0) = Self::cell_of(az[0], el[0]);
        let (a1, e1) = Self::cell_of(az[1], el[1]);
        let mut out = Vec::new();
        for a in (a0 - 1).max(self.az0)..=(a1 + 1).min(self.az0 + self.n_az as i64 - 1) {
            for e in (e0 - 1).max(self.el0)..=(e1 + 1).min(self.el0 + self.n_el as i64 - 1) {
                out.extend_from_slice(
                    &self.cells[(a - self.az0) as usize * self.n_el + (e - self.el0) as usize],
                );
            }
        }
        out.sort_unstable();
        out
    }
}

/// Viewing direction of a rig pose (radians): `Rᵀ e_z`.
pub fn direction(pan: f64, tilt: f64) -> Vector3<f64> {
    rotation_from_pan_tilt(pan, tilt).transpose() * Vector3::z()
}

/// Inverse of [`direction`].
pub fn az_el(d: &Vector3<f64>) -> (f64, f64) {
    let d = d.normalize();
    ((-d.x).atan2(d.z), (-d.y).clamp(-1.0, 1.0).asin())
}

fn frame_solid_angle(size: [f64; 2], f: f64) -> f64 {
    let (a, b) = ((size[0] / (2.0 * f)).atan(), (size[1] / (2.0 * f)).atan());
    4.0 * (a.sin() * b.sin()).asin()
}

fn random_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let s = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * s) as f32)
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / n) as f32).collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[derive(Debug, Clone)]
struct TargetPath {
    height_m: f64,
    waypoints: Vec<[f64; 3]>,
}

impl TargetPath {
    fn at(&self, frame: f64) -> Option<(Point2<f64>, [f64; 2])> {
        let w = &self.waypoints;
        if frame < w[0][2] || frame > w[w.len() - 1][2] {
            return None;
        }
        if w.len() == 1 {
            return Some((Point2::new(w[0][0], w[0][1]), [0.0, 0.0]));
        }
        let i = w
            .windows(2)
            .position(|s| frame <= s[1][2])
            .unwrap_or(w.len() - 2);
        let (a, b) = (w[i], w[i + 1]);
        let t = (frame - a[2]) / (b[2] - a[2]);
        let v = [(b[0] - a[0]) / (b[2] - a[2]), (b[1] - a[1]) / (b[2] - a[2])];
        Some((Point2::new(lerp(a[0], b[0], t), lerp(a[1], b[1], t)), v))
    }
}

pub struct Simulator {
    scenario: Scenario,
    landmarks: Vec<WorldLandmark>,
    grid: AzElGrid,
    targets: Vec<TargetPath>,
    cycle: u64,
    k_ref: Intrinsics,
    r_ref: Matrix3<f64>,
}

impl Simulator {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(STREAM_FIELD);
        let mut landmarks = Vec::new();
        let field = &scenario.landmarks;
        let size = scenario.camera.image_size;
        for level in &field.levels {
            let f_min = level.focal * 2f64.powf(-field.zoom_band);
            let half_diag = ((size[0].hypot(size[1])) / (2.0 * f_min)).atan();
            let el_lo = (field.tilt_deg[0].to_radians() - half_diag).max(-1.55);
            let el_hi = (field.tilt_deg[1].to_radians() + half_diag).min(1.55);
            let cos_max = el_lo.cos().min(el_hi.cos()).max(0.1);
            let az_lo = field.pan_deg[0].to_radians() - half_diag / cos_max;
            let az_hi = field.pan_deg[1].to_radians() + half_diag / cos_max;
            let area = (az_hi - az_lo) * (el_hi.sin() - el_lo.sin());
            let count =
                (level.per_frame * area / frame_solid_angle(size, level.focal)).round() as usize;
            for _ in 0..count {
                let az = rng.random_range(az_lo..az_hi);
                let el = rng.random_range(el_lo.sin()..el_hi.sin()).asin();
                landmarks.push(WorldLandmark {
                    id: landmarks.len() as u64,
                    dir: direction(az, el),
                    level_focal: level.focal,
                    desc: random_descriptor(&mut rng, field.descriptor_dim),
                    drift_dir: random_unit(&mut rng, field.descriptor_dim),
                    born: 0,
                    died: None,
                });
            }
        }

        let mut trng = ChaCha8Rng::seed_from_u64(scenario.seed);
        trng.set_stream(STREAM_TARGETS);
        let targets = scenario
            .targets
            .iter()
            .map(|t| TargetPath {
                height_m: t.height_m,
                waypoints: t
                    .waypoints
                    .iter()
                    .map(|w| {
                        let j = scenario.target_jitter_m;
                        let (dx, dy) = if j > 0.0 {
                            (trng.random_range(-j..j), trng.random_range(-j..j))
                        } else {
                            (0.0, 0.0)
                        };
                        [w[0] + dx, w[1] + dy, w[2]]
                    })
                    .collect(),
            })
            .collect();

        let cycle = scenario
            .trajectory
            .waypoints
            .iter()
            .map(|w| w.move_frames + w.dwell_frames)
            .sum::<u64>()
            .max(1);
        let (p, t, f) = scenario.keyframes.poses()[scenario.keyframes.reference_index()];
        let k_ref = Intrinsics::new(f, Self::pp_of(&scenario));
        let r_ref = rotation_from_pan_tilt(p.to_radians(), t.to_radians());
        let grid = AzElGrid::build(&landmarks);
        let mut sim = Self {
            scenario,
            landmarks,
            grid,
            targets,
            cycle,
            k_ref,
            r_ref,
        };
        let events = sim.scenario.events.clone();
        for e in &events {
            sim.apply_event(e);
        }
        Ok(sim)
    }

    fn pp_of(s: &Scenario) -> Point2<f64> {
        Point2::new(s.camera.image_size[0] / 2.0, s.camera.image_size[1] / 2.0)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn landmarks(&self) -> &[WorldLandmark] {
        &self.landmarks
    }

    pub fn principal_point(&self) -> Point2<f64> {
        Self::pp_of(&self.scenario)
    }

    pub fn reference_intrinsics(&self) -> Intrinsics {
        self.k_ref
    }

    pub fn reference_rotation(&self) -> Matrix3<f64> {
        self.r_ref
    }

    /// Applies a scene-change event to the landmark field.
    pub fn apply_event(&mut self, event: &Event) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.scenario.seed ^ event.frame().wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        rng.set_stream(STREAM_EVENTS);
        let dim = self.scenario.landmarks.descriptor_dim;
        let in_box = |d: &Vector3<f64>, pan: [f64; 2], tilt: [f64; 2]| {
            let (az, el) = az_el(d);
            let (az, el) = (az.to_degrees(), el.to_degrees());
            az >= pan[0] && az <= pan[1] && el >= tilt[0] && el <= tilt[1]
        };
        let mut births: Vec<(f64, [f64; 2], [f64; 2])> = Vec::new();
        match event {
            Event::Death { frame, ids } => {
                for l in &mut self.landmarks {
                    if ids.contains(&l.id) && l.alive_at(*frame) {
                        l.died = Some(*frame);
                    }
                }
            }
            Event::Birth {
                pan_deg,
                tilt_deg,
                count,
                focal,
                ..
            } => births.extend(std::iter::repeat_n((*focal, *pan_deg, *tilt_deg), *count)),
            Event::Replace {
                frame,
                pan_deg,
                tilt_deg,
            } => {
                for l in &mut self.landmarks {
                    if l.alive_at(*frame) && in_box(&l.dir, *pan_deg, *tilt_deg) {
                        l.died = Some(*frame);
                        births.push((l.level_focal, *pan_deg, *tilt_deg));
                    }
                }
            }
        }
        for (focal, pan, tilt) in births {
            let az = rng.random_range(pan[0]..=pan[1]).to_radians();
            let el = rng
                .random_range(tilt[0].to_radians().sin()..=tilt[1].to_radians().sin())
                .asin();
            self.landmarks.push(WorldLandmark {
                id: self.landmarks.len() as u64,
                dir: direction(az, el),
                level_focal: focal,
                desc: random_descriptor(&mut rng, dim),
                drift_dir: random_unit(&mut rng, dim),
                born: event.frame(),
                died: None,
            });
        }
        self.grid = AzElGrid::build(&self.landmarks);
    }

    /// Pan and tilt (degrees) and focal length of the scripted trajectory.
    pub fn pose_deg_at(&self, frame: u64) -> (f64, f64, f64) {
        let tr = &self.scenario.trajectory;
        let mut k = if tr.repeat {
            frame % self.cycle
        } else {
            frame.min(self.cycle - 1)
        };
        let n = tr.waypoints.len();
        for i in 0..n {
            let w = tr.waypoints[i];
            let prev = tr.waypoints[(i + n - 1) % n];
            let prev = if i == 0 && !tr.repeat { w } else { prev };
            if k < w.move_frames {
                let t = (k + 1) as f64 / w.move_frames as f64;
                return (
                    lerp(prev.pan_deg, w.pan_deg, t),
                    lerp(prev.tilt_deg, w.tilt_deg, t),
                    (lerp(prev.focal.ln(), w.focal.ln(), t)).exp(),
                );
            }
            k -= w.move_frames;
            if k < w.dwell_frames {
                return (w.pan_deg, w.tilt_deg, w.focal);
            }
            k -= w.dwell_frames;
        }
        let w = tr.waypoints[n - 1];
        (w.pan_deg, w.tilt_deg, w.focal)
    }

    pub fn time_at(&self, frame: u64) -> f64 {
        let mut rng = self.frame_rng(frame, 1);
        let j = self.scenario.frame_jitter;
        let jitter = if j > 0.0 {
            rng.random_range(-j..j)
        } else {
            0.0
        };
        (frame as f64 + jitter) * self.scenario.frame_interval
    }

    fn frame_rng(&self, frame: u64, sub: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.scenario
                .seed
                .wrapping_add(sub.wrapping_mul(0xD1B5_4A32_D192_ED03)),
        );
        rng.set_stream(frame);
        rng
    }

    /// World plane (meters) → rig-frame direction.
    pub fn ground_matrix(&self) -> Matrix3<f64> {
        let c = &self.scenario.camera;
        Matrix3::new(
            1.0,
            0.0,
            -c.position_m[0],
            0.0,
            0.0,
            c.height_m,
            0.0,
            1.0,
            -c.position_m[1],
        )
    }

    fn rig_point(&self, x: &Point2<f64>, z: f64) -> Vector3<f64> {
        let c = &self.scenario.camera;
        Vector3::new(x.x - c.position_m[0], c.height_m - z, x.y - c.position_m[1])
    }

    /// Reference keyframe image → world plane.
    pub fn true_h_world(&self) -> Result<Homography, SimError> {
        Ok(Homography::new(self.k_ref.matrix() * self.r_ref * self.ground_matrix())?.inverse()?)
    }

    pub fn registration_inputs(&self) -> RegistrationInputs {
        let km = self.k_ref.matrix() * self.r_ref;
        let project = |v: Vector3<f64>| Point2::new(v.x / v.z, v.y / v.z);
        let l = self.scenario.registration_length_m;
        RegistrationInputs {
            vanishing: [km * Vector3::x(), km * Vector3::z()],
            anchors: [
                project(km * self.rig_point(&Point2::origin(), 0.0)),
                project(km * self.rig_point(&Point2::new(l, 0.0), 0.0)),
            ],
            length_m: l,
        }
    }

    /// Mean reprojection discrepancy caused by actuator error at focal `f`.
    pub fn actuator_px(&self, f: f64) -> f64 {
        let t = &self.scenario.noise.actuator_px;
        if t.len() == 1 || f <= t[0][0] {
            return t[0][1];
        }
        for w in t.windows(2) {
            if f <= w[1][0] {
                return lerp(w[0][1], w[1][1], (f - w[0][0]) / (w[1][0] - w[0][0]));
            }
        }
        t[t.len() - 1][1]
    }

    fn reading(
        &self,
        pan_deg: f64,
        tilt_deg: f64,
        f: f64,
        rng: &mut ChaCha8Rng,
    ) -> ActuatorReading {
        let n = &self.scenario.noise;
        // Mean radial error m of an isotropic Gaussian has per-axis σ = m / √(π/2).
        let sigma_deg = (self.actuator_px(f) / (PI / 2.0).sqrt() / f).to_degrees();
        let q = |v: f64, step: f64| {
            if step > 0.0 {
                (v / step).round() * step
            } else {
                v
            }
        };
        let pan = pan_deg + sigma_deg * rng.sample::<f64, _>(StandardNormal);
        let tilt = tilt_deg + sigma_deg * rng.sample::<f64, _>(StandardNormal);
        let zoom = f / self.scenario.camera.base_focal
            * (1.0 + n.actuator_zoom_rel * rng.sample::<f64, _>(StandardNormal));
        ActuatorReading::new(
            q(pan, n.angle_step_deg),
            q(tilt, n.angle_step_deg),
            2f64.powf(q(zoom.max(1e-6).log2(), n.zoom_step_log2)),
        )
    }

    fn view_truth(
        &self,
        pan_deg: f64,
        tilt_deg: f64,
        f: f64,
    ) -> Result<(Matrix3<f64>, Intrinsics, FrameTruth), SimError> {
        let r = rotation_from_pan_tilt(pan_deg.to_radians(), tilt_deg.to_radians());
        let k = Intrinsics::new(f, self.principal_point());
        let h_total =
            Homography::new(self.k_ref.matrix() * self.r_ref * r.transpose() * k.inverse_matrix())?;
        let g = Homography::new(k.matrix() * r * self.ground_matrix())?;
        Ok((
            r,
            k,
            FrameTruth {
                pose: CameraPose::new(pan_deg.to_radians(), tilt_deg.to_radians(), f),
                intrinsics: k,
                h_total,
                g,
                obs_landmarks: Vec::new(),
                det_targets: Vec::new(),
                targets: Vec::new(),
            },
        ))
    }

    /// Background keypoints of a view at `frame`, plus clutter keypoints.
    fn observe(
        &self,
        r: &Matrix3<f64>,
        k: &Intrinsics,
        frame: u64,
        rng: &mut ChaCha8Rng,
        truth: &mut FrameTruth,
    ) -> Vec<Observation> {
        let [w, h] = self.scenario.camera.image_size;
        let field = &self.scenario.landmarks;
        let noise = &self.scenario.noise;
        let kinv = k.inverse_matrix();
        let mut az = [f64::INFINITY, f64::NEG_INFINITY];
        let mut el = [f64::INFINITY, f64::NEG_INFINITY];
        for (u, v) in [
            (0.0, 0.0),
            (w, 0.0),
            (0.0, h),
            (w, h),
            (w / 2.0, 0.0),
            (w / 2.0, h),
            (0.0, h / 2.0),
            (w, h / 2.0),
        ] {
            let (a, e) = az_el(&(r.transpose() * kinv * Vector3::new(u, v, 1.0)));
            az = [az[0].min(a), az[1].max(a)];
            el = [el[0].min(e), el[1].max(e)];
        }
        let km = k.matrix() * r;
        let dim = field.descriptor_dim;
        let desc_sigma = (noise.descriptor_sigma / (dim as f64).sqrt()) as f32;
        let cov = Matrix2::identity() * noise.keypoint_sigma.powi(2);
        let mut out = Vec::new();
        for i in self.grid.query(az, el) {
            let l = &self.landmarks[i];
            if !l.alive_at(frame) || (f64::log2(k.focal / l.level_focal)).abs() > field.zoom_band {
                continue;
            }
            let y = km * l.dir;
            if y.z <= 0.0 {
                continue;
            }
            let (u, v) = (y.x / y.z, y.y / y.z);
            if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
                continue;
            }
            if !rng.random_bool(field.detect_prob.clamp(0.0, 1.0)) {
                continue;
            }
            let sigma = if rng.random_bool(noise.keypoint_outlier_fraction.clamp(0.0, 1.0)) {
                noise.keypoint_outlier_sigma
            } else {
                noise.keypoint_sigma
            };
            let pos = Point2::new(
                u + sigma * rng.sample::<f64, _>(StandardNormal),
                v + sigma * rng.sample::<f64, _>(StandardNormal),
            );
            let mut desc: Descriptor = l.descriptor_at(frame, self.scenario.drift_rate);
            for d in &mut desc {
                *d += desc_sigma * rng.sample::<f32, _>(StandardNormal);
            }
            out.push(Observation::new(pos, desc).with_cov(cov));
            truth.obs_landmarks.push(Some(l.id));
        }
        let n_clutter = if noise.clutter_keypoints > 0.0 {
            Poisson::new(noise.clutter_keypoints).map_or(0, |p| p.sample(rng) as usize)
        } else {
            0
        };
        for _ in 0..n_clutter {
            let pos = Point2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
            out.push(Observation::new(pos, random_descriptor(rng, dim)).with_cov(cov));
            truth.obs_landmarks.push(None);
        }
        out
    }

    pub fn keyframe_count(&self) -> usize {
        self.scenario.keyframes.poses().len()
    }

    /// Keyframe capture at time zero.
    pub fn render_keyframe(&self, index: usize) -> Result<RenderedKeyframe, SimError> {
        self.render_keyframe_capture(index, 0)
    }

    /// One of several captures of a keyframe taken with the camera at rest;
    /// captures differ only in their noise.
    pub fn render_keyframe_capture(
        &self,
        index: usize,
        capture: u64,
    ) -> Result<RenderedKeyframe, SimError> {
        let poses = self.scenario.keyframes.poses();
        let &(p, t, f) = poses
            .get(index)
            .ok_or(SimError::FrameOutOfRange(index as u64))?;
        let (r, k, mut truth) = self.view_truth(p, t, f)?;
        let mut rng = self.frame_rng(STREAM_KEYFRAMES + index as u64, capture);
        let reading = self.reading(p, t, f, &mut rng);
        let observations = self.observe(&r, &k, 0, &mut rng, &mut truth);
        Ok(RenderedKeyframe {
            index,
            observations,
            reading,
            truth,
        })
    }

    /// Foot and head images of a person standing at `world`, `None` when either
    /// lies behind the camera.
    pub fn person_image(
        &self,
        k: &Intrinsics,
        r: &Matrix3<f64>,
        world: &Point2<f64>,
        height_m: f64,
    ) -> Option<(Point2<f64>, Point2<f64>)> {
        let km = k.matrix() * r;
        let foot = km * self.rig_point(world, 0.0);
        let head = km * self.rig_point(world, height_m);
        (foot.z > 0.0 && head.z > 0.0).then(|| {
            (
                Point2::new(foot.x / foot.z, foot.y / foot.z),
                Point2::new(head.x / head.z, head.y / head.z),
            )
        })
    }

    /// Person of the given height standing at the ground point imaged at
    /// `pixel` of the reference keyframe.
    pub fn reference_person(
        &self,
        pixel: &Point2<f64>,
        height_m: f64,
    ) -> Result<(Point2<f64>, Point2<f64>), SimError> {
        let world = self.true_h_world()?.transfer(pixel)?;
        self.person_image(&self.k_ref, &self.r_ref, &world, height_m)
            .ok_or_else(|| {
                SimError::InvalidScenario("reference pixel does not see the ground".into())
            })
    }

    pub fn target_truth(&self, frame: u64, k: &Intrinsics, r: &Matrix3<f64>) -> Vec<TargetTruth> {
        let [w, h] = self.scenario.camera.image_size;
        let km = k.matrix() * r;
        let dt = self.scenario.frame_interval;
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(i, path)| {
                let (x, v) = path.at(frame as f64)?;
                let foot = km * self.rig_point(&x, 0.0);
                let head = km * self.rig_point(&x, path.height_m);
                let (foot_px, head_px) = (
                    Point2::new(foot.x / foot.z, foot.y / foot.z),
                    Point2::new(head.x / head.z, head.y / head.z),
                );
                let in_view = foot.z > 0.0
                    && head.z > 0.0
                    && (0.0..w).contains(&foot_px.x)
                    && (0.0..h).contains(&foot_px.y);
                Some(TargetTruth {
                    id: i as u32,
                    world: x,
                    velocity: [v[0] / dt, v[1] / dt],
                    foot_px,
                    head_px,
                    in_view,
                })
            })
            .collect()
    }

    fn detect(
        &self,
        frame: u64,
        k: &Intrinsics,
        r: &Matrix3<f64>,
        rng: &mut ChaCha8Rng,
        truth: &mut FrameTruth,
    ) -> Vec<Detection> {
        let [w, h] = self.scenario.camera.image_size;
        let det = &self.scenario.detector;
        let km = k.matrix() * r;
        let noise = Normal::new(0.0, det.sigma_px.max(0.0)).expect("finite σ");
        let mut out = Vec::new();
        let emit =
            |rng: &mut ChaCha8Rng, x: &Point2<f64>, height: f64, p_detect: f64, id: Option<u32>| {
                let foot = km * self.rig_point(x, 0.0);
                let head = km * self.rig_point(x, height);
                if foot.z <= 0.0 || head.z <= 0.0 {
                    return None;
                }
                let (fp, hp) = (
                    Point2::new(foot.x / foot.z, foot.y / foot.z),
                    Point2::new(head.x / head.z, head.y / head.z),
                );
                if !(0.0..w).contains(&fp.x)
                    || !(0.0..h).contains(&fp.y)
                    || !rng.random_bool(p_detect.clamp(0.0, 1.0))
                {
                    return None;
                }
                let height_px = (hp - fp).norm()
                    * (1.0 + det.height_sigma_rel * rng.sample::<f64, _>(StandardNormal));
                Some((
                    Detection {
                        p: Point2::new(fp.x + noise.sample(rng), fp.y + noise.sample(rng)),
                        confidence: 1.0,
                        height_px,
                    },
                    id,
                ))
            };
        for (i, path) in self.targets.iter().enumerate() {
            if let Some((x, _)) = path.at(frame as f64) {
                out.extend(emit(
                    rng,
                    &x,
                    path.height_m,
                    det.detect_prob,
                    Some(i as u32),
                ));
            }
        }
        for c in &self.scenario.clutter {
            let x = Point2::new(c.position_m[0], c.position_m[1]);
            out.extend(emit(rng, &x, c.height_m, c.detect_prob, None));
        }
        let n_fa = if det.false_alarm_rate > 0.0 {
            Poisson::new(det.false_alarm_rate).map_or(0, |p| p.sample(rng) as usize)
        } else {
            0
        };
        let [h0, h1] = det.false_alarm_height_px;
        for _ in 0..n_fa {
            let d = Detection {
                p: Point2::new(rng.random_range(0.0..w), rng.random_range(0.0..h)),
                confidence: 0.5,
                height_px: rng.random_range(h0.ln()..=h1.ln()).exp(),
            };
            out.push((d, None));
        }
        truth.det_targets = out.iter().map(|(_, id)| *id).collect();
        out.into_iter().map(|(d, _)| d).collect()
    }

    pub fn render_frame(&self, frame: u64) -> Result<RenderedFrame, SimError> {
        if frame >= self.scenario.frames {
            return Err(SimError::FrameOutOfRange(frame));
        }
        let (p, t, f) = self.pose_deg_at(frame);
        let (r, k, mut truth) = self.view_truth(p, t, f)?;
        let mut rng = self.frame_rng(frame, 0);
        let reading = self.reading(p, t, f, &mut rng);
        let observations = self.observe(&r, &k, frame, &mut rng, &mut truth);
        let detections = self.detect(frame, &k, &r, &mut rng, &mut truth);
        truth.targets = self.target_truth(frame, &k, &r);
        Ok(RenderedFrame {
            frame,
            time: self.time_at(frame),
            observations,
            detections,
            reading,
            truth,
        })
    }
}
