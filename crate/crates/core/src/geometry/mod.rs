//! Projective-geometry kernel.
//!
//! Homographies are stored as 3×3 matrices scaled to unit Frobenius norm. When a
//! parameter covariance is attached it is expressed over the nine entries stacked
//! in row-major order (`h11, h12, h13, h21, ...`).

mod camera;
mod covariance;
mod dlt;

pub use camera::{
    compose_rotation_homography, decompose_to_pose, intrinsics_from_homography, nearest_rotation,
    pan_tilt_from_rotation, rotation_from_pan_tilt, CameraPose, Intrinsics, ROTATION_TOLERANCE,
};
pub use covariance::homography_covariance;
pub use dlt::{estimate_homography_dlt, has_collinear_triple};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Point2, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 9×9 covariance over the row-major stacked homography entries.
pub type Matrix9 = SMatrix<f64, 9, 9>;

/// Default keypoint localization standard deviation, pixels.
pub const DEFAULT_KEYPOINT_SIGMA: f64 = 1.0;

/// Relative size under which a homogeneous coordinate is treated as zero.
const INFINITY_EPS: f64 = 1e-12;
/// Minimum |det| of a Frobenius-normalized homography.
const DET_EPS: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("need at least 4 matches, got {0}")]
    TooFewMatches(usize),
    #[error("degenerate point configuration (collinear or duplicate points)")]
    DegenerateConfiguration,
    #[error("DLT normal matrix is numerically singular")]
    SingularNormalMatrix,
    #[error("point maps to infinity")]
    AtInfinity,
    #[error("matrix is not a rotation (orthonormality defect {0:.3e})")]
    NotARotation(f64),
    #[error("homography is not invertible")]
    NotInvertible,
    #[error("non-finite input")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Invertible projective map with optional first-order covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    h: Matrix3<f64>,
    cov: Option<Matrix9>,
}

impl Homography {
    /// Normalizes `m` to unit Frobenius norm and checks invertibility.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        Ok(Self {
            h: normalize_matrix(m)?,
            cov: None,
        })
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is invertible")
    }

    /// Builds from an already normalized matrix and covariance (deserialization path).
    pub fn from_parts(h: Matrix3<f64>, cov: Option<Matrix9>) -> Self {
        Self { h, cov }
    }

    pub fn with_covariance(mut self, cov: Matrix9) -> Self {
        self.cov = Some(cov);
        self
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn covariance(&self) -> Option<&Matrix9> {
        self.cov.as_ref()
    }

    /// Row-major stacking of the entries.
    pub fn stacked(&self) -> SMatrix<f64, 9, 1> {
        let mut v = SMatrix::<f64, 9, 1>::zeros();
        for r in 0..3 {
            for c in 0..3 {
                v[3 * r + c] = self.h[(r, c)];
            }
        }
        v
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.h.try_inverse().ok_or(GeometryError::NotInvertible)?;
        Self::new(inv)
    }

    /// Composition `self ∘ other` (apply `other` first). Covariances are dropped.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.h * other.h)
    }

    /// Maps an inhomogeneous point through the homography.
    pub fn transfer(&self, p: &Point2<f64>) -> Result<Point2<f64>> {
        project(&(self.h * Vector3::new(p.x, p.y, 1.0)))
    }

    /// Jacobian of `x ↦ π(H·x)` at `p`.
    pub fn linearize_at(&self, p: &Point2<f64>) -> Result<Matrix2<f64>> {
        linearize_homography_at(self, p)
    }
}

/// Scales `m` to unit Frobenius norm, fixing the sign so that `m[(2,2)]` is
/// positive (or the largest-magnitude entry when `m[(2,2)]` vanishes).
pub fn normalize_matrix(m: Matrix3<f64>) -> Result<Matrix3<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let n = m.norm();
    if n == 0.0 {
        return Err(GeometryError::NotInvertible);
    }
    let mut out = m / n;
    let pivot = if out[(2, 2)].abs() > 1e-9 {
        out[(2, 2)]
    } else {
        out.iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc })
    };
    if pivot < 0.0 {
        out = -out;
    }
    if out.determinant().abs() <= DET_EPS {
        return Err(GeometryError::NotInvertible);
    }
    Ok(out)
}

/// Perspective division with a relative guard on the third coordinate.
pub fn project(v: &Vector3<f64>) -> Result<Point2<f64>> {
    let scale = v.x.abs() + v.y.abs() + v.z.abs();
    if !(scale.is_finite()) || v.z.abs() <= INFINITY_EPS * scale || scale == 0.0 {
        return Err(GeometryError::AtInfinity);
    }
    Ok(Point2::new(v.x / v.z, v.y / v.z))
}

/// Jacobian of the perspective division `y ↦ (y1/y3, y2/y3)`.
pub fn division_jacobian(y: &Vector3<f64>) -> Matrix2x3<f64> {
    let w = y.z;
    Matrix2x3::new(1.0 / w, 0.0, -y.x / (w * w), 0.0, 1.0 / w, -y.y / (w * w))
}

/// Jacobian of the inhomogeneous map `x ↦ π(H·x)` evaluated at `p`.
pub fn linearize_homography_at(h: &Homography, p: &Point2<f64>) -> Result<Matrix2<f64>> {
    let y = h.h * Vector3::new(p.x, p.y, 1.0);
    project(&y)?;
    let jd = division_jacobian(&y);
    let m = h.h.fixed_view::<3, 2>(0, 0);
    Ok(jd * m)
}

/// A 2D correspondence `src → dst` with optional per-point covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub src: Point2<f64>,
    pub dst: Point2<f64>,
    pub src_cov: Option<Matrix2<f64>>,
    pub dst_cov: Option<Matrix2<f64>>,
}

impl PointMatch {
    pub fn new(src: Point2<f64>, dst: Point2<f64>) -> Self {
        Self {
            src,
            dst,
            src_cov: None,
            dst_cov: None,
        }
    }

    pub fn with_covariances(mut self, src_cov: Matrix2<f64>, dst_cov: Matrix2<f64>) -> Self {
        self.src_cov = Some(src_cov);
        self.dst_cov = Some(dst_cov);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.src.x.is_finite()
            && self.src.y.is_finite()
            && self.dst.x.is_finite()
            && self.dst.y.is_finite()
    }

    /// `|π(H·src) − dst|`, or infinity when `src` maps to infinity.
    pub fn transfer_error(&self, h: &Homography) -> f64 {
        match h.transfer(&self.src) {
            Ok(p) => (p - self.dst).norm(),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Isotropic default localization covariance.
pub fn default_keypoint_cov() -> Matrix2<f64> {
    Matrix2::identity() * DEFAULT_KEYPOINT_SIGMA * DEFAULT_KEYPOINT_SIGMA
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linearization() {
        let j = linearize_homography_at(&Homography::identity(), &Point2::new(12.0, -7.0)).unwrap();
        assert!((j - Matrix2::identity()).norm() < 1e-12);
    }

    #[test]
    fn scaling_linearization() {
        let h = Homography::new(Matrix3::from_diagonal(&Vector3::new(3.0, 3.0, 1.0))).unwrap();
        for p in [Point2::new(0.0, 0.0), Point2::new(100.0, -40.0)] {
            let j = linearize_homography_at(&h, &p).unwrap();
            assert!((j - Matrix2::identity() * 3.0).norm() < 1e-12);
        }
    }

    #[test]
    fn linearization_at_infinity() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -2.0);
        let h = Homography::new(m).unwrap();
        assert_eq!(
            linearize_homography_at(&h, &Point2::new(2.0, 5.0)),
            Err(GeometryError::AtInfinity)
        );
    }

    #[test]
    fn normalization_fixes_scale_and_sign() {
        let m = Matrix3::new(2.0, 0.1, 3.0, 0.0, 2.0, 1.0, 0.0, 0.0, 2.0);
        let a = Homography::new(m).unwrap();
        let b = Homography::new(-7.5 * m).unwrap();
        assert!((a.matrix() - b.matrix()).norm() < 1e-15);
        assert!((a.matrix().norm() - 1.0).abs() < 1e-15);
        assert!(a.matrix()[(2, 2)] > 0.0);
    }

    #[test]
    fn singular_matrix_rejected() {
        let m = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert_eq!(Homography::new(m), Err(GeometryError::NotInvertible));
    }
}
