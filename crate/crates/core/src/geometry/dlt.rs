use nalgebra::{DMatrix, Matrix3, Point2};

use super::{GeometryError, Homography, PointMatch, Result};

/// Ratio of the second-smallest to largest singular value below which the
/// design matrix is considered rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Similarity moving the centroid to the origin with mean distance √2.
pub(crate) fn hartley_transform(
    points: impl Iterator<Item = Point2<f64>> + Clone,
) -> Result<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

pub(crate) fn apply(t: &Matrix3<f64>, p: &Point2<f64>) -> Point2<f64> {
    Point2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

/// The two DLT rows for `src → dst` (both already normalized).
pub(crate) fn dlt_rows(src: &Point2<f64>, dst: &Point2<f64>) -> [[f64; 9]; 2] {
    let (x, y) = (src.x, src.y);
    let (u, v) = (dst.x, dst.y);
    [
        [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
        [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u],
    ]
}

/// Design matrix over Hartley-normalized coordinates, padded to at least nine rows.
pub(crate) fn design_matrix(src: &[Point2<f64>], dst: &[Point2<f64>]) -> DMatrix<f64> {
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        for (k, row) in dlt_rows(s, d).iter().enumerate() {
            for c in 0..9 {
                a[(2 * i + k, c)] = row[c];
            }
        }
    }
    a
}

/// Least-squares DLT with Hartley normalization of both point sets.
pub fn estimate_homography_dlt(matches: &[PointMatch]) -> Result<Homography> {
    if matches.len() < 4 {
        return Err(GeometryError::TooFewMatches(matches.len()));
    }
    if matches.iter().any(|m| !m.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let t_src = hartley_transform(matches.iter().map(|m| m.src))?;
    let t_dst = hartley_transform(matches.iter().map(|m| m.dst))?;
    let src: Vec<_> = matches.iter().map(|m| apply(&t_src, &m.src)).collect();
    let dst: Vec<_> = matches.iter().map(|m| apply(&t_dst, &m.dst)).collect();
    let a = design_matrix(&src, &dst);

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or(GeometryError::SingularNormalMatrix)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[7]];
    if !(largest > 0.0) || second_smallest / largest < RANK_TOL {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let null = v_t.row(order[8]);
    let hn = Matrix3::from_row_iterator(null.iter().copied());
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or(GeometryError::DegenerateConfiguration)?;
    Homography::new(t_dst_inv * hn * t_src).map_err(|e| match e {
        GeometryError::NotInvertible => GeometryError::DegenerateConfiguration,
        other => other,
    })
}

fn collinear(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> bool {
    let ab = b - a;
    let ac = c - a;
    let area = (ab.x * ac.y - ab.y * ac.x).abs();
    let scale = ab.norm() * ac.norm();
    scale == 0.0 || area <= 1e-9 * scale
}

/// True when any three of the given points are (numerically) collinear.
pub fn has_collinear_triple(points: &[Point2<f64>]) -> bool {
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if collinear(&points[i], &points[j], &points[k]) {
                    return true;
                }
            }
        }
    }
    false
}
