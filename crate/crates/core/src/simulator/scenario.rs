use serde::{Deserialize, Serialize};

use super::SimError;

/// Camera installation: nodal point height above the ground plane and its
/// ground position, meters. The rig frame (zero pan and tilt) has x along
/// world X, y pointing down and z along world Y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRig {
    pub height_m: f64,
    pub position_m: [f64; 2],
    /// Focal length at unit zoom magnification, pixels.
    pub base_focal: f64,
    pub image_size: [f64; 2],
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            height_m: 6.0,
            position_m: [0.0, -20.0],
            base_focal: 800.0,
            image_size: [640.0, 480.0],
        }
    }
}

/// One band of background landmarks, resolvable around a native focal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkLevel {
    pub focal: f64,
    /// Expected number of landmarks of this band inside a frame taken at `focal`.
    pub per_frame: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkField {
    /// Pan and tilt box (degrees) that the landmark field must cover.
    pub pan_deg: [f64; 2],
    pub tilt_deg: [f64; 2],
    pub levels: Vec<LandmarkLevel>,
    /// Half-width of the zoom band in which a level is detectable, log2 units.
    pub zoom_band: f64,
    pub descriptor_dim: usize,
    /// Probability that a visible landmark is detected in a frame.
    pub detect_prob: f64,
}

impl Default for LandmarkField {
    fn default() -> Self {
        Self {
            pan_deg: [-20.0, 20.0],
            tilt_deg: [-25.0, -5.0],
            levels: vec![LandmarkLevel {
                focal: 800.0,
                per_frame: 200.0,
            }],
            zoom_band: 1.0,
            descriptor_dim: 16,
            detect_prob: 0.9,
        }
    }
}

/// Camera pose keypoint: the camera moves to it over `move_frames` and then
/// stays for `dwell_frames`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub pan_deg: f64,
    pub tilt_deg: f64,
    pub focal: f64,
    #[serde(default)]
    pub move_frames: u64,
    #[serde(default)]
    pub dwell_frames: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
    /// Restart from the first waypoint after the last one.
    pub repeat: bool,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            waypoints: vec![Waypoint {
                pan_deg: 0.0,
                tilt_deg: -15.0,
                focal: 800.0,
                move_frames: 0,
                dwell_frames: 1,
            }],
            repeat: true,
        }
    }
}

/// Keyframes on a pan × tilt × focal grid, enumerated pan-major, followed by
/// any extra poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeGrid {
    pub pans_deg: Vec<f64>,
    pub tilts_deg: Vec<f64>,
    pub focals: Vec<f64>,
    /// Additional `[pan, tilt, focal]` keyframes appended after the grid.
    pub extra: Vec<[f64; 3]>,
    /// Index of the reference keyframe in the enumeration.
    pub reference: Option<usize>,
}

impl Default for KeyframeGrid {
    fn default() -> Self {
        Self {
            pans_deg: vec![-8.0, 0.0, 8.0],
            tilts_deg: vec![-20.0, -10.0],
            focals: vec![800.0],
            extra: Vec::new(),
            reference: None,
        }
    }
}

impl KeyframeGrid {
    pub fn poses(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &p in &self.pans_deg {
            for &t in &self.tilts_deg {
                for &f in &self.focals {
                    out.push((p, t, f));
                }
            }
        }
        out.extend(self.extra.iter().map(|e| (e[0], e[1], e[2])));
        out
    }

    pub fn reference_index(&self) -> usize {
        self.reference.unwrap_or_else(|| {
            let (np, nt, nf) = (self.pans_deg.len(), self.tilts_deg.len(), self.focals.len());
            ((np / 2) * nt + nt / 2) * nf
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Keypoint localization σ, pixels.
    pub keypoint_sigma: f64,
    /// Fraction of keypoints localized with `keypoint_outlier_sigma` instead.
    pub keypoint_outlier_fraction: f64,
    pub keypoint_outlier_sigma: f64,
    /// Expected norm of the descriptor noise vector.
    pub descriptor_sigma: f64,
    /// Expected number of spurious keypoints per frame.
    pub clutter_keypoints: f64,
    /// Mean reprojection discrepancy (pixels) caused by actuator error, as
    /// `[focal, pixels]` pairs interpolated in focal.
    pub actuator_px: Vec<[f64; 2]>,
    /// Relative σ of the zoom reading.
    pub actuator_zoom_rel: f64,
    /// Motor step of the pan and tilt readings, degrees.
    pub angle_step_deg: f64,
    /// Motor step of the zoom reading, log2 units.
    pub zoom_step_log2: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            keypoint_sigma: 1.0,
            keypoint_outlier_fraction: 0.0,
            keypoint_outlier_sigma: 5.0,
            descriptor_sigma: 0.15,
            clutter_keypoints: 20.0,
            actuator_px: vec![[800.0, 2.0], [2085.0, 9.0]],
            actuator_zoom_rel: 0.01,
            angle_step_deg: 0.01,
            zoom_step_log2: 1.0 / 256.0,
        }
    }
}

/// Scene-change event applied to the landmark field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    /// Landmarks with the given ids disappear.
    Death { frame: u64, ids: Vec<u64> },
    /// New landmarks appear inside a pan/tilt box.
    Birth {
        frame: u64,
        pan_deg: [f64; 2],
        tilt_deg: [f64; 2],
        count: usize,
        focal: f64,
    },
    /// Every landmark in the box disappears and as many new ones appear there
    /// (an object leaving and revealing background).
    Replace {
        frame: u64,
        pan_deg: [f64; 2],
        tilt_deg: [f64; 2],
    },
}

impl Event {
    pub fn frame(&self) -> u64 {
        match self {
            Event::Death { frame, .. }
            | Event::Birth { frame, .. }
            | Event::Replace { frame, .. } => *frame,
        }
    }
}

/// Pedestrian moving along piecewise-linear world waypoints `[X, Y, frame]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(default = "default_height")]
    pub height_m: f64,
    pub waypoints: Vec<[f64; 3]>,
}

fn default_height() -> f64 {
    1.8
}

/// Static object that a multi-scale detector mistakes for a person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClutterObject {
    pub position_m: [f64; 2],
    pub height_m: f64,
    pub detect_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorModel {
    /// Foot localization σ, pixels.
    pub sigma_px: f64,
    /// Relative σ of the reported height.
    pub height_sigma_rel: f64,
    pub detect_prob: f64,
    /// Expected number of false alarms per frame.
    pub false_alarm_rate: f64,
    /// Height range of false alarms, pixels.
    pub false_alarm_height_px: [f64; 2],
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            sigma_px: 2.0,
            height_sigma_rel: 0.05,
            detect_prob: 0.95,
            false_alarm_rate: 0.5,
            false_alarm_height_px: [30.0, 300.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub frames: u64,
    /// Nominal frame period, seconds.
    pub frame_interval: f64,
    /// Timestamp jitter as a fraction of the frame period.
    pub frame_jitter: f64,
    pub camera: CameraRig,
    pub landmarks: LandmarkField,
    pub trajectory: Trajectory,
    pub keyframes: KeyframeGrid,
    pub noise: NoiseModel,
    /// Descriptor drift per frame (norm).
    pub drift_rate: f64,
    pub events: Vec<Event>,
    pub targets: Vec<TargetSpec>,
    /// Per-seed random offset of target waypoints, meters.
    pub target_jitter_m: f64,
    pub clutter: Vec<ClutterObject>,
    pub detector: DetectorModel,
    /// Length of the registration baseline along world X, meters.
    pub registration_length_m: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 1,
            frames: 500,
            frame_interval: 0.04,
            frame_jitter: 0.1,
            camera: CameraRig::default(),
            landmarks: LandmarkField::default(),
            trajectory: Trajectory::default(),
            keyframes: KeyframeGrid::default(),
            noise: NoiseModel::default(),
            drift_rate: 0.0,
            events: Vec::new(),
            targets: Vec::new(),
            target_jitter_m: 0.0,
            clutter: Vec::new(),
            detector: DetectorModel::default(),
            registration_length_m: 10.0,
        }
    }
}

const BUILTIN: &[(&str, &str)] = &[
    ("revisit", include_str!("../../scenarios/revisit.toml")),
    (
        "zoom_ladder",
        include_str!("../../scenarios/zoom_ladder.toml"),
    ),
    ("crossing", include_str!("../../scenarios/crossing.toml")),
    (
        "parked_car",
        include_str!("../../scenarios/parked_car.toml"),
    ),
    (
        "throughput",
        include_str!("../../scenarios/throughput.toml"),
    ),
];

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario =
            toml::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Result<Self, SimError> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| SimError::InvalidScenario(format!("unknown scenario {name}")))?;
        Self::from_toml(text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let in_range =
            |pan: f64, tilt: f64| (-170.0..=170.0).contains(&pan) && (-80.0..=60.0).contains(&tilt);
        if self.frames == 0
            || !(self.frame_interval > 0.0)
            || !(0.0..0.5).contains(&self.frame_jitter)
        {
            return bad("frame count, interval or jitter out of range".into());
        }
        if !(self.camera.height_m > 0.0) || !(self.camera.base_focal > 0.0) {
            return bad("camera height and base focal must be positive".into());
        }
        if self.trajectory.waypoints.is_empty() {
            return bad("trajectory needs at least one waypoint".into());
        }
        for w in &self.trajectory.waypoints {
            if !in_range(w.pan_deg, w.tilt_deg) || !(w.focal > 0.0) {
                return bad(format!("waypoint {w:?} outside the mechanical range"));
            }
        }
        let kf = self.keyframes.poses();
        if kf.is_empty() || self.keyframes.reference_index() >= kf.len() {
            return bad("keyframe grid is empty or the reference index is out of range".into());
        }
        if kf.iter().any(|&(p, t, f)| !in_range(p, t) || !(f > 0.0)) {
            return bad("keyframe outside the mechanical range".into());
        }
        if self.landmarks.descriptor_dim == 0 || self.landmarks.levels.is_empty() {
            return bad(
                "landmark field needs a descriptor dimension and at least one level".into(),
            );
        }
        if self.events.windows(2).any(|w| w[0].frame() > w[1].frame()) {
            return bad("events are not time-ordered".into());
        }
        for t in &self.targets {
            if t.waypoints.windows(2).any(|w| w[0][2] >= w[1][2]) || t.waypoints.is_empty() {
                return bad("target waypoints must have increasing frames".into());
            }
        }
        if self.noise.actuator_px.is_empty() {
            return bad("actuator noise table is empty".into());
        }
        Ok(())
    }
}
