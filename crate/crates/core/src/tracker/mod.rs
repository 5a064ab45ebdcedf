//! Multi-target tracking on the world plane with Cheap-JPDAF association.
//!
//! The state is `[X, Y, Ẋ, Ẏ]` in meters (3D mode) or pixels (2D mode). In 3D
//! mode the measurement is the exact projective map `π(G · [X, Y, 1]ᵀ)` with the
//! 2×4 Jacobian `[∂π(G x)/∂x | 0]` used for gain and covariance.

mod jpdaf;

pub use jpdaf::{associate_cheap_jpdaf, associate_greedy, Association};

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Point2, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Homography};
use crate::worldproj::{estimate_scale, vanishing_line, Homology, LineConvention};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("track projects behind the camera")]
    BehindCamera,
    #[error("innovation covariance is singular")]
    SingularS,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub id: u64,
    pub s: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub status: TrackStatus,
    pub age: u32,
    pub hits: u32,
    /// Consecutive frames without a gated detection.
    pub misses: u32,
    /// Hit flags of the most recent frames, newest in bit 0.
    pub history: u32,
    /// Apparent height, pixels.
    pub height_px: f64,
}

impl TargetState {
    pub fn new(id: u64, s: Vector4<f64>, p: Matrix4<f64>) -> Self {
        Self {
            id,
            s,
            p,
            status: TrackStatus::Tentative,
            age: 0,
            hits: 0,
            misses: 0,
            history: 0,
            height_px: 0.0,
        }
    }

    pub fn position(&self) -> Point2<f64> {
        Point2::new(self.s[0], self.s[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Foot point, pixels.
    pub p: Point2<f64>,
    pub confidence: f64,
    pub height_px: f64,
}

/// Constant-velocity model with white-acceleration process noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    pub sigma_a: f64,
}

impl MotionModel {
    pub fn transition(dt: f64) -> Matrix4<f64> {
        let mut a = Matrix4::identity();
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        a
    }

    pub fn process_noise(&self, dt: f64) -> Matrix4<f64> {
        let q = self.sigma_a * self.sigma_a;
        let (a, b, c) = (q * dt.powi(4) / 4.0, q * dt.powi(3) / 2.0, q * dt * dt);
        Matrix4::new(
            a, 0.0, b, 0.0, 0.0, a, 0.0, b, b, 0.0, c, 0.0, 0.0, b, 0.0, c,
        )
    }
}

pub fn predict(track: &TargetState, dt: f64, model: &MotionModel) -> TargetState {
    let a = MotionModel::transition(dt);
    let mut out = track.clone();
    out.s = a * track.s;
    let p = a * track.p * a.transpose() + model.process_noise(dt);
    out.p = (p + p.transpose()) * 0.5;
    out
}

/// Measurement map from state to image.
#[derive(Debug, Clone, Copy)]
pub enum Measurement<'a> {
    /// World-plane state observed through `G` (world → frame).
    World(&'a Homography),
    /// State already in pixels.
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub p: Point2<f64>,
    pub jacobian: Matrix2x4<f64>,
    pub s: Matrix2<f64>,
}

pub fn project_track(
    track: &TargetState,
    meas: Measurement<'_>,
    v: &Matrix2<f64>,
) -> Result<Projection, TrackError> {
    let (p, j2) = match meas {
        Measurement::Image => (track.position(), Matrix2::identity()),
        Measurement::World(g) => {
            let x = track.position();
            let y = g.matrix() * Vector3::new(x.x, x.y, 1.0);
            let l = vanishing_line(g, LineConvention::Pullback)
                .map_err(|_| TrackError::BehindCamera)?;
            if y.z.abs() <= 1e-12 * y.norm() {
                return Err(TrackError::BehindCamera);
            }
            let p = Point2::new(y.x / y.z, y.y / y.z);
            if l.dot(&Vector3::new(p.x, p.y, 1.0)) * l.y.signum() <= 0.0 {
                return Err(TrackError::BehindCamera);
            }
            (p, g.linearize_at(&x)?)
        }
    };
    let mut jacobian = Matrix2x4::zeros();
    jacobian.fixed_view_mut::<2, 2>(0, 0).copy_from(&j2);
    let s = jacobian * track.p * jacobian.transpose() + v;
    Ok(Projection {
        p,
        jacobian,
        s: (s + s.transpose()) * 0.5,
    })
}

/// Probabilistic-data-association update with weighted innovations `(β_j, ν_j)`.
///
/// The gain is `K = P G̃ᵀ S⁻¹`; the detection-conditioned covariance uses the
/// Joseph form. With a single weight of one this is the plain EKF update.
pub fn update(
    track: &TargetState,
    proj: &Projection,
    innovations: &[(f64, Vector2<f64>)],
    v: &Matrix2<f64>,
) -> Result<TargetState, TrackError> {
    let s_inv = proj.s.try_inverse().ok_or(TrackError::SingularS)?;
    let gain: Matrix4x2<f64> = track.p * proj.jacobian.transpose() * s_inv;
    let ikh = Matrix4::identity() - gain * proj.jacobian;
    let p_c = ikh * track.p * ikh.transpose() + gain * v * gain.transpose();
    let mut out = track.clone();
    if let [(b, nu)] = innovations {
        if *b == 1.0 {
            out.s = track.s + gain * nu;
            out.p = (p_c + p_c.transpose()) * 0.5;
            return Ok(out);
        }
    }
    let beta_sum: f64 = innovations.iter().map(|(b, _)| b).sum();
    let nu: Vector2<f64> = innovations.iter().map(|(b, n)| n * *b).sum();
    let spread: Matrix2<f64> = innovations
        .iter()
        .map(|(b, n)| n * n.transpose() * *b)
        .sum::<Matrix2<f64>>()
        - nu * nu.transpose();
    out.s = track.s + gain * nu;
    let p = track.p * (1.0 - beta_sum) + p_c * beta_sum + gain * spread * gain.transpose();
    out.p = (p + p.transpose()) * 0.5;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackingMode {
    #[default]
    World,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMethod {
    #[default]
    CheapJpdaf,
    GreedyNearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub mode: TrackingMode,
    pub association: AssociationMethod,
    /// White-acceleration σ, m/s² in 3D mode.
    pub sigma_a: f64,
    /// White-acceleration σ, px/s² in 2D mode.
    pub sigma_a_px: f64,
    /// Detection localization σ, pixels.
    pub v_sigma_px: f64,
    /// Mahalanobis gate radius.
    pub gate: f64,
    /// Detections closer than this Mahalanobis radius to any track do not start new tracks.
    pub spawn_gate: f64,
    /// Clutter bias as a fraction of the largest peak likelihood.
    pub bias_factor: f64,
    pub confirm_hits: u32,
    pub confirm_window: u32,
    pub max_misses: u32,
    /// Measurement-noise inflation when the pose is stale.
    pub stale_inflation: f64,
    /// Initial speed σ of a new track, m/s (3D).
    pub init_speed_sigma: f64,
    /// Initial speed σ of a new track, px/s (2D).
    pub init_speed_sigma_px: f64,
    /// Weight of a new detection height in the 2D scale estimate.
    pub scale_smoothing: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            mode: TrackingMode::World,
            association: AssociationMethod::CheapJpdaf,
            sigma_a: 0.5,
            sigma_a_px: 30.0,
            v_sigma_px: 2.0,
            gate: 3.0,
            spawn_gate: 6.0,
            bias_factor: 1e-3,
            confirm_hits: 3,
            confirm_window: 5,
            max_misses: 10,
            stale_inflation: 4.0,
            init_speed_sigma: 1.5,
            init_speed_sigma_px: 40.0,
            scale_smoothing: 0.5,
        }
    }
}

/// One row of the trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u64,
    pub track_id: u64,
    pub x: f64,
    pub y: f64,
    pub image_x: f64,
    pub image_y: f64,
    pub height_px: f64,
    pub status: TrackStatus,
}

pub struct FrameInput<'a> {
    pub frame: u64,
    /// Frame timestamp, seconds.
    pub time: f64,
    /// World → frame homography; required in 3D mode.
    pub g: Option<&'a Homography>,
    pub homology: Option<&'a Homology>,
    pub stale: bool,
    pub detections: &'a [Detection],
}

#[derive(Debug, Clone)]
pub struct Tracker {
    pub config: TrackerConfig,
    tracks: Vec<TargetState>,
    next_id: u64,
    last_time: Option<f64>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            config,
            tracks: Vec::new(),
            next_id: 1,
            last_time: None,
        }
    }

    pub fn tracks(&self) -> &[TargetState] {
        &self.tracks
    }

    fn noise(&self, stale: bool) -> Matrix2<f64> {
        let s = self.config.v_sigma_px;
        let k = if stale {
            self.config.stale_inflation
        } else {
            1.0
        };
        Matrix2::identity() * (s * s * k)
    }

    fn motion(&self) -> MotionModel {
        MotionModel {
            sigma_a: match self.config.mode {
                TrackingMode::World => self.config.sigma_a,
                TrackingMode::Image => self.config.sigma_a_px,
            },
        }
    }

    /// Predicted image foot of every active track (`None` when it cannot be projected).
    pub fn predicted_feet(
        &self,
        g: Option<&Homography>,
        dt: f64,
    ) -> Vec<(u64, Option<Point2<f64>>, f64)> {
        let model = self.motion();
        self.tracks
            .iter()
            .map(|t| {
                let pred = predict(t, dt.max(0.0), &model);
                let p = match (self.config.mode, g) {
                    (TrackingMode::Image, _) => Some(pred.position()),
                    (TrackingMode::World, Some(g)) => {
                        project_track(&pred, Measurement::World(g), &Matrix2::identity())
                            .ok()
                            .map(|p| p.p)
                    }
                    (TrackingMode::World, None) => None,
                };
                (t.id, p, t.height_px)
            })
            .collect()
    }

    /// Time to the given frame timestamp since the last processed frame.
    pub fn dt_to(&self, time: f64) -> f64 {
        self.last_time.map_or(0.0, |t| time - t)
    }

    pub fn step(&mut self, input: &FrameInput<'_>) -> Vec<TrackRecord> {
        let dt = self.dt_to(input.time);
        self.last_time = Some(input.time);
        let v = self.noise(input.stale);
        let model = self.motion();
        let meas = match (self.config.mode, input.g) {
            (TrackingMode::Image, _) => Some(Measurement::Image),
            (TrackingMode::World, Some(g)) => Some(Measurement::World(g)),
            (TrackingMode::World, None) => None,
        };

        let predicted: Vec<TargetState> = self
            .tracks
            .iter()
            .map(|t| {
                if dt > 0.0 {
                    predict(t, dt, &model)
                } else {
                    t.clone()
                }
            })
            .collect();
        let projections: Vec<Option<Projection>> = predicted
            .iter()
            .map(|t| meas.and_then(|m| project_track(t, m, &v).ok()))
            .collect();

        let assoc = match self.config.association {
            AssociationMethod::CheapJpdaf => associate_cheap_jpdaf(
                &projections,
                input.detections,
                self.config.gate,
                self.config.bias_factor,
            ),
            AssociationMethod::GreedyNearest => {
                associate_greedy(&projections, input.detections, self.config.gate)
            }
        };

        let mut next = Vec::with_capacity(predicted.len());
        for (i, mut t) in predicted.into_iter().enumerate() {
            t.age += 1;
            let weights = &assoc.weights[i];
            let hit = !weights.is_empty();
            if let (Some(proj), true) = (&projections[i], hit) {
                let innov: Vec<(f64, Vector2<f64>)> = weights
                    .iter()
                    .map(|&(j, b)| (b, input.detections[j].p - proj.p))
                    .collect();
                if let Ok(u) = update(&t, proj, &innov, &v) {
                    t.s = u.s;
                    t.p = u.p;
                }
                if self.config.mode == TrackingMode::Image {
                    let total: f64 = weights.iter().map(|&(_, b)| b).sum();
                    if total > 0.0 {
                        let h: f64 = weights
                            .iter()
                            .map(|&(j, b)| b * input.detections[j].height_px)
                            .sum::<f64>()
                            / total;
                        let a = if t.height_px > 0.0 {
                            self.config.scale_smoothing
                        } else {
                            1.0
                        };
                        t.height_px += a * (h - t.height_px);
                    }
                }
            }
            self.register(&mut t, hit);
            next.push(t);
        }
        self.tracks = next;
        let spawn: Vec<usize> = assoc
            .unassociated
            .iter()
            .copied()
            .filter(|&j| {
                projections.iter().flatten().all(|proj| {
                    let nu = input.detections[j].p - proj.p;
                    proj.s.try_inverse().is_none_or(|si| {
                        (nu.transpose() * si * nu)[0] > self.config.spawn_gate.powi(2)
                    })
                })
            })
            .collect();
        self.track_manage(&spawn, input, &v);

        if self.config.mode == TrackingMode::World {
            if let (Some(g), Some(hom)) = (input.g, input.homology) {
                for t in &mut self.tracks {
                    if let Ok(p) = project_track(t, Measurement::World(g), &v) {
                        if let Ok(sc) = estimate_scale(hom, &p.p) {
                            t.height_px = sc.height_px;
                        }
                    }
                }
            }
        }

        let records = self.records(input);
        self.tracks.retain(|t| t.status != TrackStatus::Lost);
        records
    }

    fn register(&self, t: &mut TargetState, hit: bool) {
        t.history = (t.history << 1) | hit as u32;
        if hit {
            t.hits += 1;
            t.misses = 0;
        } else {
            t.misses += 1;
        }
        let window = (1u32 << self.config.confirm_window.min(31)) - 1;
        let recent = (t.history & window).count_ones();
        match t.status {
            TrackStatus::Tentative => {
                if recent >= self.config.confirm_hits {
                    t.status = TrackStatus::Confirmed;
                } else if recent + self.config.confirm_window.saturating_sub(t.age)
                    < self.config.confirm_hits
                {
                    t.status = TrackStatus::Lost;
                }
            }
            TrackStatus::Confirmed => {
                if t.misses >= self.config.max_misses {
                    t.status = TrackStatus::Lost;
                }
            }
            TrackStatus::Lost => {}
        }
    }

    /// Starts a tentative track for every detection outside all gates.
    pub fn track_manage(
        &mut self,
        unassociated: &[usize],
        input: &FrameInput<'_>,
        v: &Matrix2<f64>,
    ) {
        for &j in unassociated {
            let d = &input.detections[j];
            let init = match self.config.mode {
                TrackingMode::Image => {
                    let mut p = Matrix4::zeros();
                    p.fixed_view_mut::<2, 2>(0, 0).copy_from(v);
                    let sv = self.config.init_speed_sigma_px.powi(2);
                    p[(2, 2)] = sv;
                    p[(3, 3)] = sv;
                    Some((Vector4::new(d.p.x, d.p.y, 0.0, 0.0), p))
                }
                TrackingMode::World => input.g.and_then(|g| {
                    let ginv = g.inverse().ok()?;
                    let x = ginv.transfer(&d.p).ok()?;
                    let j = ginv.linearize_at(&d.p).ok()?;
                    let mut p = Matrix4::zeros();
                    p.fixed_view_mut::<2, 2>(0, 0)
                        .copy_from(&(j * v * j.transpose()));
                    let sv = self.config.init_speed_sigma.powi(2);
                    p[(2, 2)] = sv;
                    p[(3, 3)] = sv;
                    Some((Vector4::new(x.x, x.y, 0.0, 0.0), p))
                }),
            };
            let Some((s, p)) = init else { continue };
            let mut t = TargetState::new(self.next_id, s, p);
            self.next_id += 1;
            t.age = 1;
            t.hits = 1;
            t.history = 1;
            t.height_px = d.height_px;
            if self.config.confirm_hits <= 1 {
                t.status = TrackStatus::Confirmed;
            }
            self.tracks.push(t);
        }
    }

    fn records(&self, input: &FrameInput<'_>) -> Vec<TrackRecord> {
        let v = Matrix2::identity();
        self.tracks
            .iter()
            .map(|t| {
                let (world, image) = match self.config.mode {
                    TrackingMode::World => {
                        let img = input
                            .g
                            .and_then(|g| project_track(t, Measurement::World(g), &v).ok())
                            .map_or(Point2::new(f64::NAN, f64::NAN), |p| p.p);
                        (t.position(), img)
                    }
                    TrackingMode::Image => {
                        let w = input
                            .g
                            .and_then(|g| g.inverse().ok())
                            .and_then(|gi| gi.transfer(&t.position()).ok())
                            .unwrap_or(Point2::new(f64::NAN, f64::NAN));
                        (w, t.position())
                    }
                };
                TrackRecord {
                    frame: input.frame,
                    track_id: t.id,
                    x: world.x,
                    y: world.y,
                    image_x: image.x,
                    image_y: image.y,
                    height_px: t.height_px,
                    status: t.status,
                }
            })
            .collect()
    }
}
