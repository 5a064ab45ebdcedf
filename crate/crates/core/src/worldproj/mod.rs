//! Frame ↔ world-plane transforms and homology-based target scale.
//!
//! `G` maps world-plane coordinates (meters, `Z = 0`) to frame pixels. The
//! homology `W = I + (μ − 1) v lᵀ / (vᵀ l)` has the image of the world plane's
//! line at infinity `l` as axis and the vertical vanishing point `v = K Kᵀ l` as
//! center; it maps the image of a target's foot to the image of its head.

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Homography, Intrinsics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("point maps to infinity")]
    AtInfinity,
    #[error("vanishing point lies on the vanishing line")]
    DegenerateHomology,
    #[error("foot point lies above the horizon")]
    AboveHorizon,
    #[error("reference observation is degenerate")]
    DegenerateObservation,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// How the vanishing line of the world plane is obtained from `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LineConvention {
    /// `l = G⁻ᵀ [0, 0, 1]ᵀ`, the image of the plane's line at infinity.
    #[default]
    Pullback,
    /// `l = G [0, 0, 1]ᵀ` taken literally.
    Literal,
}

pub fn vanishing_line(
    g: &Homography,
    convention: LineConvention,
) -> Result<Vector3<f64>, WorldError> {
    let l = match convention {
        LineConvention::Pullback => g
            .matrix()
            .try_inverse()
            .ok_or(GeometryError::NotInvertible)?
            .transpose()
            .column(2)
            .into_owned(),
        LineConvention::Literal => g.matrix().column(2).into_owned(),
    };
    let n = l.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(WorldError::DegenerateHomology);
    }
    Ok(l / n)
}

/// World point (meters) to frame pixel.
pub fn world_to_frame(g: &Homography, x: &Point2<f64>) -> Result<Point2<f64>, WorldError> {
    g.transfer(x).map_err(|e| match e {
        GeometryError::AtInfinity => WorldError::AtInfinity,
        e => e.into(),
    })
}

/// Frame pixel to world point (meters).
pub fn frame_to_world(g: &Homography, p: &Point2<f64>) -> Result<Point2<f64>, WorldError> {
    world_to_frame(&g.inverse()?, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Homology {
    pub w: Matrix3<f64>,
    pub l_inf: Vector3<f64>,
    pub v_inf: Vector3<f64>,
    pub mu: f64,
}

impl Homology {
    /// Head position for the foot `p`.
    fn apply(&self, p: &Point2<f64>) -> Result<Point2<f64>, WorldError> {
        let y = self.w * Vector3::new(p.x, p.y, 1.0);
        if y.z.abs() <= 1e-12 * y.norm() {
            return Err(WorldError::AtInfinity);
        }
        Ok(Point2::new(y.x / y.z, y.y / y.z))
    }

    /// Signed side of `p` relative to the axis; positive on the ground side of an upright camera.
    fn side(&self, p: &Point2<f64>) -> f64 {
        let s = self.l_inf.dot(&Vector3::new(p.x, p.y, 1.0));
        s * self.l_inf.y.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub foot: Point2<f64>,
    pub head: Point2<f64>,
    pub height_px: f64,
    pub stale: bool,
}

fn vertical_point(k: &Intrinsics, l: &Vector3<f64>) -> Vector3<f64> {
    let km = k.matrix();
    km * km.transpose() * l
}

pub fn build_homology(
    g: &Homography,
    k: &Intrinsics,
    mu: f64,
    convention: LineConvention,
) -> Result<Homology, WorldError> {
    let l = vanishing_line(g, convention)?;
    let v = vertical_point(k, &l);
    let v = v / v.norm();
    let denom = v.dot(&l);
    if denom.abs() < 1e-12 {
        return Err(WorldError::DegenerateHomology);
    }
    let w = Matrix3::identity() + (mu - 1.0) * (v * l.transpose()) / denom;
    Ok(Homology {
        w,
        l_inf: l,
        v_inf: v,
        mu,
    })
}

pub fn estimate_scale(
    homology: &Homology,
    foot: &Point2<f64>,
) -> Result<ScaleEstimate, WorldError> {
    let side = homology.side(foot);
    if side < -1e-12 * Vector3::new(foot.x, foot.y, 1.0).norm() {
        return Err(WorldError::AboveHorizon);
    }
    let head = homology.apply(foot)?;
    Ok(ScaleEstimate {
        foot: *foot,
        head,
        height_px: (head - foot).norm(),
        stale: false,
    })
}

/// Cross-ratio that makes the homology map `foot` onto `head` exactly (in the
/// least-squares sense when the pair is not consistent with the center).
pub fn calibrate_mu(
    g: &Homography,
    k: &Intrinsics,
    foot: &Point2<f64>,
    head: &Point2<f64>,
    convention: LineConvention,
) -> Result<f64, WorldError> {
    if (head - foot).norm() < 1e-9 {
        return Err(WorldError::DegenerateObservation);
    }
    let l = vanishing_line(g, convention)?;
    let v = vertical_point(k, &l);
    let v = v / v.norm();
    let denom = v.dot(&l);
    if denom.abs() < 1e-12 {
        return Err(WorldError::DegenerateHomology);
    }
    let p = Vector3::new(foot.x, foot.y, 1.0);
    let a = l.dot(&p) / denom;
    if a.abs() < 1e-12 {
        return Err(WorldError::DegenerateObservation);
    }
    // π(p + c v) = head, linear in c per coordinate.
    let (mut num, mut den) = (0.0, 0.0);
    for (vi, hi, pi) in [(v.x, head.x, foot.x), (v.y, head.y, foot.y)] {
        let coef = vi - hi * v.z;
        num += coef * (hi - pi);
        den += coef * coef;
    }
    if den < 1e-24 {
        return Err(WorldError::DegenerateObservation);
    }
    Ok(1.0 + num / den / a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_from_pan_tilt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CAM_HEIGHT: f64 = 6.0;

    /// World (X, Y, Z) with Z up, camera at height `CAM_HEIGHT` above the origin
    /// offset by 20 m along Y, to a frame pixel.
    fn project(pan: f64, tilt: f64, f: f64, x: f64, y: f64, z: f64) -> Point2<f64> {
        let k = Intrinsics::new(f, Point2::new(320.0, 240.0));
        let c = k.matrix()
            * rotation_from_pan_tilt(pan, tilt)
            * Vector3::new(x, CAM_HEIGHT - z, y + 20.0);
        Point2::new(c.x / c.z, c.y / c.z)
    }

    fn g_of(pan: f64, tilt: f64, f: f64) -> (Homography, Intrinsics) {
        let k = Intrinsics::new(f, Point2::new(320.0, 240.0));
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, CAM_HEIGHT, 0.0, 1.0, 20.0);
        let g = Homography::new(k.matrix() * rotation_from_pan_tilt(pan, tilt) * m).unwrap();
        (g, k)
    }

    #[test]
    fn world_frame_round_trip() {
        let (g, _) = g_of(0.2, -0.3, 700.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = Point2::new(rng.random_range(-10.0..10.0), rng.random_range(-5.0..30.0));
            let back = frame_to_world(&g, &world_to_frame(&g, &x).unwrap()).unwrap();
            assert!((back - x).norm() < 1e-9);
        }
    }

    #[test]
    fn unit_mu_is_identity() {
        let (g, k) = g_of(0.1, -0.2, 600.0);
        let h = build_homology(&g, &k, 1.0, LineConvention::Pullback).unwrap();
        assert!((h.w - Matrix3::identity()).norm() < 1e-15);
        let s = estimate_scale(&h, &Point2::new(300.0, 400.0)).unwrap();
        assert!(s.height_px < 1e-12);
    }

    #[test]
    fn axis_and_center_are_fixed() {
        let (g, k) = g_of(-0.3, -0.25, 900.0);
        let h = build_homology(&g, &k, 0.7, LineConvention::Pullback).unwrap();
        let l = h.l_inf;
        for t in [-500.0, 0.0, 300.0, 2000.0] {
            // points on l: solve l·(x, y, 1) = 0 for y
            let p = Vector3::new(t, -(l.x * t + l.z) / l.y, 1.0);
            let q = h.w * p;
            assert!((q / q.z - p).norm() < 1e-9);
        }
        let wv = h.w * h.v_inf;
        assert!(wv.cross(&h.v_inf).norm() < 1e-12 * wv.norm());
    }

    #[test]
    fn mu_round_trip_and_cross_pose_reuse() {
        let (g, k) = g_of(0.05, -0.35, 800.0);
        let (foot, head) = (
            project(0.05, -0.35, 800.0, 1.0, 5.0, 0.0),
            project(0.05, -0.35, 800.0, 1.0, 5.0, 1.8),
        );
        let mu = calibrate_mu(&g, &k, &foot, &head, LineConvention::Pullback).unwrap();
        let h = build_homology(&g, &k, mu, LineConvention::Pullback).unwrap();
        assert!((estimate_scale(&h, &foot).unwrap().head - head).norm() < 1e-9);
        let h2 = build_homology(&g, &k, mu * 1.3, LineConvention::Pullback).unwrap();
        let head2 = estimate_scale(&h2, &foot).unwrap().head;
        let mu2 = calibrate_mu(&g, &k, &foot, &head2, LineConvention::Pullback).unwrap();
        assert!((mu2 - mu * 1.3).abs() < 1e-9);

        for (pan, tilt, f) in [
            (0.4, -0.2, 1500.0),
            (-0.3, -0.5, 500.0),
            (0.0, -0.15, 2000.0),
        ] {
            let (g, k) = g_of(pan, tilt, f);
            let h = build_homology(&g, &k, mu, LineConvention::Pullback).unwrap();
            for (x, y) in [(0.0, 0.0), (-3.0, 8.0), (2.0, 15.0)] {
                let foot = project(pan, tilt, f, x, y, 0.0);
                let truth = project(pan, tilt, f, x, y, 1.8);
                let est = estimate_scale(&h, &foot).unwrap();
                let height = (truth - foot).norm();
                assert!(
                    (est.head - truth).norm() <= 1e-6 * height,
                    "{pan} {tilt} {f}"
                );
            }
        }
    }

    #[test]
    fn literal_line_does_not_reproduce_heads() {
        let (g, k) = g_of(0.05, -0.35, 800.0);
        let foot = project(0.05, -0.35, 800.0, 1.0, 5.0, 0.0);
        let head = project(0.05, -0.35, 800.0, 1.0, 5.0, 1.8);
        let mu = calibrate_mu(&g, &k, &foot, &head, LineConvention::Literal).unwrap();
        let h = build_homology(&g, &k, mu, LineConvention::Literal).unwrap();
        let foot2 = project(0.05, -0.35, 800.0, -4.0, 12.0, 0.0);
        let head2 = project(0.05, -0.35, 800.0, -4.0, 12.0, 1.8);
        let err = estimate_scale(&h, &foot2)
            .map(|s| (s.head - head2).norm())
            .unwrap_or(f64::INFINITY);
        assert!(err > 0.02 * (head2 - foot2).norm());
    }

    #[test]
    fn nearer_targets_are_taller_and_horizon_is_rejected() {
        let (g, k) = g_of(0.0, -0.3, 700.0);
        let foot = project(0.0, -0.3, 700.0, 0.0, 0.0, 0.0);
        let head = project(0.0, -0.3, 700.0, 0.0, 0.0, 1.8);
        let mu = calibrate_mu(&g, &k, &foot, &head, LineConvention::Pullback).unwrap();
        let h = build_homology(&g, &k, mu, LineConvention::Pullback).unwrap();
        let near = estimate_scale(&h, &project(0.0, -0.3, 700.0, 0.0, -5.0, 0.0)).unwrap();
        let far = estimate_scale(&h, &project(0.0, -0.3, 700.0, 0.0, 10.0, 0.0)).unwrap();
        assert!(near.height_px > far.height_px);
        // Above the horizon: a point well up in the sky.
        let sky = project(0.0, -0.3, 700.0, 0.0, 1e6, 3e5);
        assert_eq!(estimate_scale(&h, &sky), Err(WorldError::AboveHorizon));
        assert_eq!(
            calibrate_mu(&g, &k, &foot, &foot, LineConvention::Pullback),
            Err(WorldError::DegenerateObservation)
        );
    }

    #[test]
    fn scale_is_invariant_to_projective_scale_of_g() {
        let (g, k) = g_of(0.2, -0.4, 650.0);
        let g2 = Homography::from_parts(g.matrix() * -3.7, None);
        let h1 = build_homology(&g, &k, 0.6, LineConvention::Pullback).unwrap();
        let h2 = build_homology(&g2, &k, 0.6, LineConvention::Pullback).unwrap();
        let p = Point2::new(350.0, 420.0);
        let (a, b) = (
            estimate_scale(&h1, &p).unwrap(),
            estimate_scale(&h2, &p).unwrap(),
        );
        assert!((a.head - b.head).norm() < 1e-9);
    }
}
