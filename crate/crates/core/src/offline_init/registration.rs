use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use super::InitError;
use crate::geometry::{Homography, Intrinsics};

/// Metric rectification of the ground plane from two orthogonal vanishing points.
///
/// With `K_r` the reference intrinsics, the plane normal in camera coordinates is
/// `n ∝ K_rᵀ (v1 × v2)` and the in-plane axes are `e1 ∝ K_r⁻¹ v1`, `e2 = e1 × n`.
/// `H_p = [e1 e2 n]ᵀ K_r⁻¹` sends a mosaic pixel to plane coordinates measured
/// in units of the camera height (the plane is fixed up to a similarity). The
/// normal is oriented so that points on the plane have positive depth along it.
pub fn rectify_from_vanishing(
    v1: &Vector3<f64>,
    v2: &Vector3<f64>,
    k_r: &Intrinsics,
) -> Result<Homography, InitError> {
    let scale = |v: &Vector3<f64>| v.norm().max(f64::MIN_POSITIVE);
    let (u1, u2) = (v1 / scale(v1), v2 / scale(v2));
    let line = u1.cross(&u2);
    if !(line.norm() > 1e-9) {
        return Err(InitError::DegenerateVanishingGeometry);
    }
    let mut n = (k_r.matrix().transpose() * line).normalize();
    let pick = if n.y.abs() > 1e-12 { n.y } else { n.z };
    if pick < 0.0 {
        n = -n;
    }
    let d1 = k_r.inverse_matrix() * u1;
    let d2 = k_r.inverse_matrix() * u2;
    if !(d1.norm() > 0.0) || !(d2.norm() > 0.0) {
        return Err(InitError::DegenerateVanishingGeometry);
    }
    let e1 = d1.normalize();
    let e2 = e1.cross(&n);
    let basis = Matrix3::from_rows(&[e1.transpose(), e2.transpose(), n.transpose()]);
    Homography::new(basis * k_r.inverse_matrix())
        .map_err(|_| InitError::DegenerateVanishingGeometry)
}

/// Similarity taking `H_p p1` to the origin and `H_p p2` to `(length, 0)`.
pub fn scale_from_known_distance(
    p1: &Point2<f64>,
    p2: &Point2<f64>,
    length: f64,
    h_p: &Homography,
) -> Result<Homography, InitError> {
    let q1 = h_p.transfer(p1)?;
    let q2 = h_p.transfer(p2)?;
    let d = q2 - q1;
    let dist = d.norm();
    if !(dist > 1e-12 * (q1.coords.norm() + q2.coords.norm()).max(1.0)) || !(length > 0.0) {
        return Err(InitError::CoincidentPoints);
    }
    let s = length / dist;
    let (c, sn) = (d.x / dist, d.y / dist);
    // s · R(-θ) · T(-q1)
    let m = Matrix3::new(
        s * c,
        s * sn,
        -s * (c * q1.x + sn * q1.y),
        -s * sn,
        s * c,
        -s * (-sn * q1.x + c * q1.y),
        0.0,
        0.0,
        1.0,
    );
    Ok(Homography::new(m)?)
}

/// Registration of the reference mosaic to the metric world plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldRegistration {
    pub h_p: Homography,
    pub h_s: Homography,
    /// `H_s · H_p`: reference mosaic → world plane (meters).
    pub h_w: Homography,
    pub length_m: f64,
    pub anchors: [Point2<f64>; 2],
}

impl WorldRegistration {
    pub fn new(
        vanishing: [Vector3<f64>; 2],
        k_r: &Intrinsics,
        anchors: [Point2<f64>; 2],
        length_m: f64,
    ) -> Result<Self, InitError> {
        let h_p = rectify_from_vanishing(&vanishing[0], &vanishing[1], k_r)?;
        let h_s = scale_from_known_distance(&anchors[0], &anchors[1], length_m, &h_p)?;
        let h_w = h_s.compose(&h_p)?;
        Ok(Self {
            h_p,
            h_s,
            h_w,
            length_m,
            anchors,
        })
    }

    pub fn identity() -> Self {
        Self {
            h_p: Homography::identity(),
            h_s: Homography::identity(),
            h_w: Homography::identity(),
            length_m: 1.0,
            anchors: [Point2::origin(), Point2::new(1.0, 0.0)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_from_pan_tilt;

    fn k() -> Intrinsics {
        Intrinsics::new(900.0, Point2::new(320.0, 240.0))
    }

    /// Ground plane y = h below a camera with the given tilt, world (X, Y) = camera (x, z) at zero tilt.
    fn project(tilt: f64, h: f64, x: f64, y: f64) -> Point2<f64> {
        let r = rotation_from_pan_tilt(0.0, tilt);
        let p = k().matrix() * r * Vector3::new(x, h, y);
        Point2::new(p.x / p.z, p.y / p.z)
    }

    fn vps(tilt: f64) -> [Vector3<f64>; 2] {
        let r = rotation_from_pan_tilt(0.0, tilt);
        [
            k().matrix() * r * Vector3::x(),
            k().matrix() * r * Vector3::z(),
        ]
    }

    #[test]
    fn rectified_input_gives_similarity() {
        let h = rectify_from_vanishing(
            &Vector3::new(1.0, 0.0, 0.0),
            &Vector3::new(0.0, 1.0, 0.0),
            &k(),
        )
        .unwrap();
        let m = h.matrix() / h.matrix()[(2, 2)];
        assert!(m[(2, 0)].abs() < 1e-12 && m[(2, 1)].abs() < 1e-12);
        let a = m.fixed_view::<2, 2>(0, 0).into_owned();
        let ata = a.transpose() * a;
        assert!((ata[(0, 0)] - ata[(1, 1)]).abs() < 1e-15 && ata[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn tilted_square_regains_right_angles() {
        let tilt = (-20f64).to_radians();
        let hp = rectify_from_vanishing(&vps(tilt)[0], &vps(tilt)[1], &k()).unwrap();
        let corners = [(-1.0f64, 10.0f64), (1.0, 10.0), (1.0, 12.0), (-1.0, 12.0)];
        let q: Vec<_> = corners
            .iter()
            .map(|&(x, y)| hp.transfer(&project(tilt, 3.0, x, y)).unwrap())
            .collect();
        for i in 0..4 {
            let a = q[(i + 1) % 4] - q[i];
            let b = q[(i + 3) % 4] - q[i];
            let angle = (a.dot(&b) / (a.norm() * b.norm())).acos().to_degrees();
            assert!((angle - 90.0).abs() < 0.1, "corner {i}: {angle}");
        }
    }

    #[test]
    fn coincident_vanishing_points_are_degenerate() {
        let v = Vector3::new(100.0, 50.0, 1.0);
        assert!(matches!(
            rectify_from_vanishing(&v, &(v * 3.0), &k()),
            Err(InitError::DegenerateVanishingGeometry)
        ));
    }

    #[test]
    fn scale_is_length_ratio() {
        let hp = Homography::identity();
        let hs =
            scale_from_known_distance(&Point2::new(0.0, 0.0), &Point2::new(3.0, 4.0), 10.0, &hp)
                .unwrap();
        let a = hs.transfer(&Point2::new(0.0, 0.0)).unwrap();
        let b = hs.transfer(&Point2::new(3.0, 4.0)).unwrap();
        assert!(a.coords.norm() < 1e-12);
        assert!((b - Point2::new(10.0, 0.0)).norm() < 1e-12);
        let unit =
            scale_from_known_distance(&Point2::new(1.0, 1.0), &Point2::new(4.0, 5.0), 5.0, &hp)
                .unwrap();
        let m = unit.matrix() / unit.matrix()[(2, 2)];
        assert!((m.fixed_view::<2, 2>(0, 0).determinant() - 1.0).abs() < 1e-12);
        assert!(matches!(
            scale_from_known_distance(&Point2::new(1.0, 1.0), &Point2::new(1.0, 1.0), 5.0, &hp),
            Err(InitError::CoincidentPoints)
        ));
    }

    #[test]
    fn registration_recovers_world_distances() {
        let tilt = (-25f64).to_radians();
        let anchors = [project(tilt, 4.0, 0.0, 8.0), project(tilt, 4.0, 5.0, 8.0)];
        let reg = WorldRegistration::new(vps(tilt), &k(), anchors, 5.0).unwrap();
        let world = [(-2.0f64, 6.0f64), (3.0, 9.0), (1.0, 15.0), (-4.0, 20.0)];
        for &(x, y) in &world {
            let w = reg.h_w.transfer(&project(tilt, 4.0, x, y)).unwrap();
            assert!(
                (w - Point2::new(x, y - 8.0)).norm() < 1e-9,
                "{w:?} vs ({x}, {})",
                y - 8.0
            );
        }
    }
}
