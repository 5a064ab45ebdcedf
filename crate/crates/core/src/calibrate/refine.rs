use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};

use crate::geometry::{
    nearest_rotation, project, GeometryError, Homography, Intrinsics, PointMatch,
};

type Params = SVector<f64, 4>;

const MAX_ITERATIONS: usize = 20;
const STEP: f64 = 1e-6;

/// Chain `K_r · Q · K_k⁻¹` for a rotation `Q` and focal `f_k`.
fn chain(k_r: &Intrinsics, q: &Matrix3<f64>, focal: f64) -> Matrix3<f64> {
    k_r.matrix() * q * k_r.with_focal(focal).inverse_matrix()
}

fn rotated(q0: &Matrix3<f64>, p: &Params) -> Matrix3<f64> {
    Rotation3::new(Vector3::new(p[0], p[1], p[2])).matrix() * q0
}

/// Starting rotation and focal of a frame→reference chain, without any
/// orthonormality gate.
fn initial(h_total: &Homography, k_r: &Intrinsics) -> Result<(Matrix3<f64>, f64), GeometryError> {
    let t_pp = Matrix3::new(1.0, 0.0, k_r.pp.x, 0.0, 1.0, k_r.pp.y, 0.0, 0.0, 1.0);
    let m = k_r.inverse_matrix() * h_total.matrix() * t_pp;
    let (n1, n2, n3) = (m.column(0).norm(), m.column(1).norm(), m.column(2).norm());
    let focal = n3 / (0.5 * (n1 + n2));
    if !(focal.is_finite() && focal > 0.0) {
        return Err(GeometryError::NotARotation(f64::INFINITY));
    }
    let (q, _) = nearest_rotation(
        &(k_r.inverse_matrix() * h_total.matrix() * k_r.with_focal(focal).matrix()),
    )?;
    Ok((q, focal))
}

fn residuals(
    h_view_inv: &Matrix3<f64>,
    k_r: &Intrinsics,
    q: &Matrix3<f64>,
    focal: f64,
    inliers: &[PointMatch],
) -> Option<Vec<f64>> {
    let h = h_view_inv * chain(k_r, q, focal);
    let mut r = Vec::with_capacity(2 * inliers.len());
    for m in inliers {
        let p = project(&(h * m.src.to_homogeneous())).ok()?;
        r.push(p.x - m.dst.x);
        r.push(p.y - m.dst.y);
    }
    Some(r)
}

/// Refits the frame→view homography `h_rk⁻¹ · K_r Q K_k⁻¹` with a pure
/// rotation `Q` and a single focal length, minimizing transfer error over the
/// inliers. Returns the frame→view homography.
pub fn refine_rotation_homography(
    h: &Homography,
    h_rk: &Homography,
    k_r: &Intrinsics,
    inliers: &[PointMatch],
) -> Result<Homography, GeometryError> {
    let h_total = h_rk.compose(h)?;
    let (q0, f0) = initial(&h_total, k_r)?;
    let h_view_inv = *h_rk.inverse()?.matrix();
    let eval = |p: &Params| residuals(&h_view_inv, k_r, &rotated(&q0, p), f0 * p[3].exp(), inliers);
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    let mut p = Params::zeros();
    let mut r = eval(&p).ok_or(GeometryError::NotARotation(f64::INFINITY))?;
    let mut c = cost(&r);
    let mut lambda = 1e-3;
    for _ in 0..MAX_ITERATIONS {
        let mut jtj = SMatrix::<f64, 4, 4>::zeros();
        let mut jtr = Params::zeros();
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(4);
        for k in 0..4 {
            let mut dp = p;
            dp[k] += STEP;
            let rp = eval(&dp).ok_or(GeometryError::NotARotation(f64::INFINITY))?;
            cols.push(rp.iter().zip(&r).map(|(a, b)| (a - b) / STEP).collect());
        }
        for i in 0..4 {
            jtr[i] = cols[i].iter().zip(&r).map(|(a, b)| a * b).sum();
            for j in 0..4 {
                jtj[(i, j)] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            }
        }
        let mut improved = false;
        while lambda < 1e8 {
            let mut a = jtj;
            for i in 0..4 {
                a[(i, i)] *= 1.0 + lambda;
            }
            let Some(delta) = a.lu().solve(&(-jtr)) else {
                break;
            };
            let cand = p + delta;
            if let Some(rc) = eval(&cand) {
                let cc = cost(&rc);
                if cc < c {
                    let done = (c - cc) <= 1e-12 * c.max(1e-300);
                    p = cand;
                    r = rc;
                    c = cc;
                    lambda = (lambda * 0.3).max(1e-9);
                    improved = !done;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let h_total = chain(k_r, &rotated(&q0, &p), f0 * p[3].exp());
    Homography::new(h_view_inv * h_total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        compose_rotation_homography, intrinsics_from_homography, rotation_from_pan_tilt,
    };
    use nalgebra::Point2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn refit_restores_a_rotation_chain() {
        let pp = Point2::new(320.0, 240.0);
        let k_r = Intrinsics::new(800.0, pp);
        let k_v = Intrinsics::new(820.0, pp);
        let k_k = Intrinsics::new(870.0, pp);
        let r_v = rotation_from_pan_tilt(0.1, -0.2);
        let r_k = rotation_from_pan_tilt(0.13, -0.23);
        let h_rk =
            compose_rotation_homography(&k_r, &nalgebra::Matrix3::identity(), &r_v, &k_v).unwrap();
        let h_true = compose_rotation_homography(&k_v, &r_v, &r_k, &k_k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let matches: Vec<PointMatch> = (0..60)
            .map(|_| {
                let src = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                let dst = h_true.transfer(&src).unwrap();
                PointMatch::new(
                    src,
                    dst + nalgebra::Vector2::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                )
            })
            .collect();
        // A perturbed start with a skew the rotation model cannot represent.
        let mut m = *h_true.matrix();
        m[(0, 1)] += 0.02 * m[(0, 0)];
        let refit = refine_rotation_homography(&Homography::new(m).unwrap(), &h_rk, &k_r, &matches)
            .unwrap();
        let total = h_rk.compose(&refit).unwrap();
        let k = intrinsics_from_homography(&total, &k_r).unwrap();
        assert!((k.focal / 870.0 - 1.0).abs() < 5e-3, "{}", k.focal);
        let err: f64 = matches
            .iter()
            .map(|m| m.transfer_error(&refit))
            .sum::<f64>()
            / matches.len() as f64;
        assert!(err < 1.5, "{err}");
    }
}
