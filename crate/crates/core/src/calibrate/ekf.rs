use nalgebra::{Matrix2, Matrix3, Point2, SMatrix, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::CalibrateError;
use crate::geometry::{default_keypoint_cov, division_jacobian, Homography, PointMatch};

/// Which Kalman gain expression the landmark update uses.
///
/// `AsPrinted` is `K = P C [C P Cᵀ + Λ]⁻¹` with `C = H̃⁻¹`; `Textbook` is the
/// standard `K = P Cᵀ [C P Cᵀ + Λ]⁻¹`. They coincide whenever `C` is symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GainForm {
    #[default]
    AsPrinted,
    Textbook,
}

/// Per-match measurement noise in the current frame, pixels².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNoise {
    pub total: Matrix2<f64>,
    /// Spread of the homography estimate.
    pub homography: Matrix2<f64>,
    /// Keypoint localization in the current frame.
    pub keypoint: Matrix2<f64>,
    /// Landmark position uncertainty carried into the frame.
    pub landmark: Matrix2<f64>,
}

/// Covariance of the residual `v − π(H⁻¹ u)` for a frame → map match `v → u`.
///
/// The homography and landmark terms are formed in homogeneous coordinates
/// around `z = H⁻¹ u` and reduced to the inhomogeneous 2×2 block through the
/// perspective-division Jacobian. A missing homography covariance counts as zero.
pub fn measurement_covariance(
    m: &PointMatch,
    h: &Homography,
    landmark_cov: &Matrix2<f64>,
) -> Result<MeasurementNoise, CalibrateError> {
    let hm = h.matrix();
    let h_inv = hm.try_inverse().ok_or(CalibrateError::SingularInnovation)?;
    let v = Vector3::new(m.src.x, m.src.y, 1.0);
    let y = hm * v;
    if y.z.abs() < 1e-12 {
        return Err(CalibrateError::SingularInnovation);
    }
    let z = v / y.z;
    let jz = division_jacobian(&z);

    let homography = match h.covariance() {
        Some(sigma) => {
            // ∂(H z)/∂h for row-major stacking: I₃ ⊗ zᵀ.
            let mut b = SMatrix::<f64, 3, 9>::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    b[(r, 3 * r + c)] = z[c];
                }
            }
            let g = jz * h_inv * b;
            g * sigma * g.transpose()
        }
        None => Matrix2::zeros(),
    };
    let mut p3 = Matrix3::zeros();
    p3.fixed_view_mut::<2, 2>(0, 0).copy_from(landmark_cov);
    let gl = jz * h_inv;
    let landmark = gl * p3 * gl.transpose();
    let keypoint = m.src_cov.unwrap_or_else(default_keypoint_cov);
    let sym = |a: Matrix2<f64>| (a + a.transpose()) * 0.5;
    let (homography, landmark) = (sym(homography), sym(landmark));
    Ok(MeasurementNoise {
        total: homography + keypoint + landmark,
        homography,
        keypoint,
        landmark,
    })
}

/// EKF refinement of a landmark position `u` (view-map frame) and covariance `P`
/// from an observation `v` (current frame) matched under the frame → map `H`.
///
/// With `H̃` the Jacobian of `x ↦ π(H x)` at `v` and `C = H̃⁻¹`, the innovation is
/// `C (π(H v) − u)` and `S = C P Cᵀ + Λ`.
pub fn ekf_update_landmark(
    pos: &mut Point2<f64>,
    cov: &mut Matrix2<f64>,
    obs: &Point2<f64>,
    h: &Homography,
    noise: &Matrix2<f64>,
    form: GainForm,
) -> Result<(), CalibrateError> {
    let h_tilde = h.linearize_at(obs)?;
    let c = h_tilde
        .try_inverse()
        .ok_or(CalibrateError::SingularInnovation)?;
    let back = h.transfer(obs)?;
    let innovation = c * (back - *pos);
    let p = *cov;
    let s = c * p * c.transpose() + noise;
    let s_inv = s.try_inverse().ok_or(CalibrateError::SingularInnovation)?;
    if !s_inv.iter().all(|x| x.is_finite()) {
        return Err(CalibrateError::SingularInnovation);
    }
    let k = match form {
        GainForm::AsPrinted => p * c * s_inv,
        GainForm::Textbook => p * c.transpose() * s_inv,
    };
    let ikc = Matrix2::identity() - k * c;
    let updated = match form {
        GainForm::AsPrinted => ikc * p,
        GainForm::Textbook => ikc * p * ikc.transpose() + k * noise * k.transpose(),
    };
    *pos += k * innovation;
    *cov = nearest_psd(&((updated + updated.transpose()) * 0.5));
    Ok(())
}

fn nearest_psd(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(*m);
    if eig.eigenvalues.min() >= 0.0 {
        return *m;
    }
    let d = Vector2::new(eig.eigenvalues[0].max(0.0), eig.eigenvalues[1].max(0.0));
    eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose()
}
