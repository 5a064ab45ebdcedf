use nalgebra::{Matrix3, SMatrix, SymmetricEigen};

use super::dlt::{apply, design_matrix, dlt_rows, hartley_transform};
use super::{default_keypoint_cov, GeometryError, Homography, Matrix9, PointMatch, Result};

type Vector9 = SMatrix<f64, 9, 1>;

/// First-order covariance of the stacked, Frobenius-normalized DLT estimate.
///
/// The DLT solution is the unit null vector of the normal matrix `AᵀA`. A
/// perturbation of one point coordinate `c` moves it by
/// `−(AᵀA)⁺ (∂Aᵀ/∂c · A h + Aᵀ · ∂A/∂c · h)`; these Jacobians are propagated
/// through the per-point covariances, then through the Hartley de-normalization
/// and the final unit-norm rescaling. Missing per-point covariances default to
/// the isotropic keypoint model.
pub fn homography_covariance(h: &Homography, matches: &[PointMatch]) -> Result<Matrix9> {
    if matches.len() < 4 {
        return Err(GeometryError::TooFewMatches(matches.len()));
    }
    let t_src = hartley_transform(matches.iter().map(|m| m.src))?;
    let t_dst = hartley_transform(matches.iter().map(|m| m.dst))?;
    let s_src = t_src[(0, 0)];
    let s_dst = t_dst[(0, 0)];
    let src: Vec<_> = matches.iter().map(|m| apply(&t_src, &m.src)).collect();
    let dst: Vec<_> = matches.iter().map(|m| apply(&t_dst, &m.dst)).collect();

    let t_src_inv = t_src
        .try_inverse()
        .ok_or(GeometryError::DegenerateConfiguration)?;
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or(GeometryError::DegenerateConfiguration)?;
    let hn_mat = t_dst * h.matrix() * t_src_inv;
    let hn_mat = hn_mat / hn_mat.norm();
    let hn = stack(&hn_mat);

    let a = design_matrix(&src, &dst);
    let ata = a.transpose() * &a;
    let normal = Matrix9::from_iterator(ata.iter().copied());
    let eig = SymmetricEigen::new(normal);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let largest = eig.eigenvalues[order[0]];
    if !(largest > 0.0) || eig.eigenvalues[order[7]] / largest < 1e-18 {
        return Err(GeometryError::SingularNormalMatrix);
    }
    let mut pinv = Matrix9::zeros();
    for &k in &order[..8] {
        let e = eig.eigenvectors.column(k);
        pinv += e * e.transpose() / eig.eigenvalues[k];
    }

    let mut sigma_n = Matrix9::zeros();
    for (i, m) in matches.iter().enumerate() {
        let rows = dlt_rows(&src[i], &dst[i]);
        let residual = [dot(&rows[0], &hn), dot(&rows[1], &hn)];
        let (x, y) = (src[i].x, src[i].y);
        let (u, v) = (dst[i].x, dst[i].y);
        // ∂row/∂(x, y, u, v) for the two DLT rows of this point.
        let drows: [[[f64; 9]; 2]; 4] = [
            [
                [0.0, 0.0, 0.0, -1.0, 0.0, 0.0, v, 0.0, 0.0],
                [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -u, 0.0, 0.0],
            ],
            [
                [0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, v, 0.0],
                [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -u, 0.0],
            ],
            [[0.0; 9], [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -x, -y, -1.0]],
            [[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, x, y, 1.0], [0.0; 9]],
        ];
        let mut jac = SMatrix::<f64, 9, 4>::zeros();
        for (c, dr) in drows.iter().enumerate() {
            let mut g = Vector9::zeros();
            for k in 0..2 {
                let d = dot(&dr[k], &hn);
                for j in 0..9 {
                    g[j] += dr[k][j] * residual[k] + rows[k][j] * d;
                }
            }
            jac.set_column(c, &(-(pinv * g)));
        }
        let cs = m.src_cov.unwrap_or_else(default_keypoint_cov) * (s_src * s_src);
        let cd = m.dst_cov.unwrap_or_else(default_keypoint_cov) * (s_dst * s_dst);
        let mut c4 = SMatrix::<f64, 4, 4>::zeros();
        c4.fixed_view_mut::<2, 2>(0, 0).copy_from(&cs);
        c4.fixed_view_mut::<2, 2>(2, 2).copy_from(&cd);
        sigma_n += jac * c4 * jac.transpose();
    }

    // vec(T'⁻¹ Hn T) = L vec(Hn), row-major stacking.
    let mut l = Matrix9::zeros();
    for r in 0..3 {
        for c in 0..3 {
            for a_ in 0..3 {
                for b in 0..3 {
                    l[(3 * r + c, 3 * a_ + b)] = t_dst_inv[(r, a_)] * t_src[(b, c)];
                }
            }
        }
    }
    let h_raw = t_dst_inv * hn_mat * t_src;
    let norm = h_raw.norm();
    let unit = stack(&h_raw) / norm;
    let n = (Matrix9::identity() - unit * unit.transpose()) / norm;
    let jt = n * l;
    let cov = jt * sigma_n * jt.transpose();
    Ok((cov + cov.transpose()) * 0.5)
}

fn stack(m: &Matrix3<f64>) -> Vector9 {
    Vector9::from_iterator(m.transpose().iter().copied())
}

fn dot(row: &[f64; 9], h: &Vector9) -> f64 {
    row.iter().zip(h.iter()).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::estimate_homography_dlt;
    use nalgebra::{Matrix2, Point2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(cov: Matrix2<f64>) -> (Homography, Vec<PointMatch>) {
        let truth = Matrix3::new(0.9, 0.1, 20.0, -0.05, 1.05, 5.0, 2e-4, 1e-4, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let matches: Vec<_> = (0..15)
            .map(|_| {
                let p = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                let q = truth * Vector3::new(p.x, p.y, 1.0);
                PointMatch::new(p, Point2::new(q.x / q.z, q.y / q.z)).with_covariances(cov, cov)
            })
            .collect();
        (estimate_homography_dlt(&matches).unwrap(), matches)
    }

    #[test]
    fn zero_input_covariance_gives_zero() {
        let (h, m) = fixture(Matrix2::zeros());
        assert!(homography_covariance(&h, &m).unwrap().norm() < 1e-30);
    }

    #[test]
    fn scales_linearly_with_input_covariance() {
        let (h, m1) = fixture(Matrix2::identity());
        let (_, m4) = fixture(Matrix2::identity() * 4.0);
        let c1 = homography_covariance(&h, &m1).unwrap();
        let c4 = homography_covariance(&h, &m4).unwrap();
        assert!((c4 - c1 * 4.0).norm() <= 1e-9 * c4.norm());
    }

    #[test]
    fn symmetric_psd_and_orthogonal_to_h() {
        let (h, m) = fixture(Matrix2::identity());
        let c = homography_covariance(&h, &m).unwrap();
        assert!((c - c.transpose()).norm() < 1e-18);
        let eig = SymmetricEigen::new(c);
        assert!(eig.eigenvalues.min() >= -1e-12 * c.trace());
        // The scale direction is unobservable after Frobenius normalization.
        assert!((c * h.stacked()).norm() < 1e-9 * c.norm());
    }
}
