//! Pinhole intrinsics, pan/tilt rotations and the rotation-only homography model.
//!
//! Frames follow the image convention: x right, y down, z along the optical
//! axis. The camera rotation is `R = R_tilt(φ) · R_pan(ψ)`, where pan turns about
//! the vertical axis (positive pans right) and tilt turns about the camera
//! x-axis (positive tilts up).

use nalgebra::{Matrix3, Point2, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Homography, Result};

/// Largest Frobenius distance between a scale-normalized chain and its
/// nearest rotation that is still accepted as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-2;

/// Zero-skew, unit-aspect intrinsics with a fixed principal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub pp: Point2<f64>,
}

impl Intrinsics {
    pub fn new(focal: f64, pp: Point2<f64>) -> Self {
        debug_assert!(focal > 0.0);
        Self { focal, pp }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal, 0.0, self.pp.x, 0.0, self.focal, self.pp.y, 0.0, 0.0, 1.0,
        )
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        let f = self.focal;
        Matrix3::new(
            1.0 / f,
            0.0,
            -self.pp.x / f,
            0.0,
            1.0 / f,
            -self.pp.y / f,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn with_focal(&self, focal: f64) -> Self {
        Self { focal, pp: self.pp }
    }
}

/// Pan and tilt in radians, focal length in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub pan: f64,
    pub tilt: f64,
    pub focal: f64,
}

impl CameraPose {
    pub fn new(pan: f64, tilt: f64, focal: f64) -> Self {
        Self { pan, tilt, focal }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_pan_tilt(self.pan, self.tilt)
    }

    pub fn intrinsics(&self, pp: Point2<f64>) -> Intrinsics {
        Intrinsics::new(self.focal, pp)
    }
}

pub fn rotation_from_pan_tilt(pan: f64, tilt: f64) -> Matrix3<f64> {
    let r_pan = Rotation3::from_axis_angle(&Vector3::y_axis(), pan);
    let r_tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), -tilt);
    (r_tilt * r_pan).into_inner()
}

/// Inverse of [`rotation_from_pan_tilt`]; any roll component is ignored.
pub fn pan_tilt_from_rotation(r: &Matrix3<f64>) -> (f64, f64) {
    let pan = r[(0, 2)].atan2(r[(0, 0)]);
    let tilt = (-r[(2, 1)]).atan2(r[(1, 1)]);
    (pan, tilt)
}

/// `K_r · R_r · R_k⁻¹ · K_k⁻¹`: maps keyframe-k pixels into the reference frame.
pub fn compose_rotation_homography(
    k_r: &Intrinsics,
    r_r: &Matrix3<f64>,
    r_k: &Matrix3<f64>,
    k_k: &Intrinsics,
) -> Result<Homography> {
    Homography::new(k_r.matrix() * r_r * r_k.transpose() * k_k.inverse_matrix())
}

/// Nearest rotation (orthogonal Procrustes) and the Frobenius defect of `m`
/// after fixing its scale by the cube root of its determinant.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<(Matrix3<f64>, f64)> {
    let det = m.determinant();
    if !det.is_finite() || det == 0.0 {
        return Err(GeometryError::NotARotation(f64::INFINITY));
    }
    let scaled = m / det.cbrt();
    let svd = scaled.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    d[(2, 2)] = (u * v_t).determinant().signum();
    let r = u * d * v_t;
    Ok((r, (scaled - r).norm()))
}

/// Pose of the current frame from its frame→reference chain.
///
/// `K_r⁻¹ · h_total · K_k` is projected to the nearest rotation, which equals
/// `R_kᵀ` under the `R_reference = I` gauge; pan and tilt are read from `R_k`.
pub fn decompose_to_pose(
    h_total: &Homography,
    k_r: &Intrinsics,
    k_k: &Intrinsics,
) -> Result<CameraPose> {
    let m = k_r.inverse_matrix() * h_total.matrix() * k_k.matrix();
    let (r, defect) = nearest_rotation(&m)?;
    if defect > ROTATION_TOLERANCE {
        return Err(GeometryError::NotARotation(defect));
    }
    let (pan, tilt) = pan_tilt_from_rotation(&r.transpose());
    Ok(CameraPose::new(pan, tilt, k_k.focal))
}

/// Focal length of the current frame from its frame→reference chain.
///
/// With `K_r⁻¹ h T_pp ∝ R · diag(1/f, 1/f, 1)` the first two columns have norm
/// `λ/f` and the third `λ`, so `f` is the ratio of column norms.
pub fn intrinsics_from_homography(h: &Homography, k_r: &Intrinsics) -> Result<Intrinsics> {
    let t_pp = Matrix3::new(1.0, 0.0, k_r.pp.x, 0.0, 1.0, k_r.pp.y, 0.0, 0.0, 1.0);
    let m = k_r.inverse_matrix() * h.matrix() * t_pp;
    let (c1, c2, c3) = (m.column(0), m.column(1), m.column(2));
    let (n1, n2, n3) = (c1.norm(), c2.norm(), c3.norm());
    if !(n1 > 0.0 && n2 > 0.0 && n3 > 0.0) {
        return Err(GeometryError::NotARotation(f64::INFINITY));
    }
    let defect = [
        (c1.dot(&c2) / (n1 * n2)).abs(),
        (c1.dot(&c3) / (n1 * n3)).abs(),
        (c2.dot(&c3) / (n2 * n3)).abs(),
        (n1 / n2 - 1.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if defect > ROTATION_TOLERANCE {
        return Err(GeometryError::NotARotation(defect));
    }
    Ok(Intrinsics::new(n3 / (0.5 * (n1 + n2)), k_r.pp))
}
