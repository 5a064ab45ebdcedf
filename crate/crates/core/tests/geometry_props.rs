use nalgebra::{Matrix3, Point2};
use proptest::prelude::*;
use ptz_core::geometry::{
    compose_rotation_homography, decompose_to_pose, estimate_homography_dlt, homography_covariance,
    intrinsics_from_homography, CameraPose, Homography, Intrinsics, PointMatch,
};

const PP: Point2<f64> = Point2::new(640.0, 360.0);

fn pose() -> impl Strategy<Value = CameraPose> {
    (-1.2f64..1.2, -0.8f64..0.2, 400.0f64..4000.0).prop_map(|(p, t, f)| CameraPose::new(p, t, f))
}

fn grid() -> Vec<Point2<f64>> {
    (0..5)
        .flat_map(|i| (0..4).map(move |j| Point2::new(100.0 + 270.0 * i as f64, 60.0 + 200.0 * j as f64)))
        .collect()
}

fn matrix() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform8(-0.2f64..0.2).prop_map(|e| {
        Matrix3::new(
            1.0 + e[0],
            e[1],
            40.0 * e[2],
            e[3],
            1.0 + e[4],
            40.0 * e[5],
            1e-4 * e[6],
            1e-4 * e[7],
            1.0,
        )
    })
}

proptest! {
    #[test]
    fn rotation_chain_decomposes_to_its_pose(r in pose(), k in pose()) {
        let k_r = r.intrinsics(PP);
        let k_k = k.intrinsics(PP);
        let h = compose_rotation_homography(&k_r, &Matrix3::identity(), &k.rotation(), &k_k).unwrap();
        let f = intrinsics_from_homography(&h, &k_r).unwrap();
        prop_assert!((f.focal / k.focal - 1.0).abs() < 1e-9);
        let p = decompose_to_pose(&h, &k_r, &f).unwrap();
        prop_assert!((p.pan - k.pan).abs() < 1e-9 && (p.tilt - k.tilt).abs() < 1e-9);
    }

    #[test]
    fn dlt_recovers_exact_homographies(m in matrix()) {
        let h = Homography::new(m).unwrap();
        let matches: Vec<PointMatch> = grid().into_iter().map(|p| PointMatch::new(p, h.transfer(&p).unwrap())).collect();
        let est = estimate_homography_dlt(&matches).unwrap();
        let sign = est.matrix().dot(h.matrix()).signum();
        prop_assert!((est.matrix() * sign - h.matrix()).norm() < 1e-8);
        for m in &matches {
            prop_assert!(m.transfer_error(&est) < 1e-6);
        }
    }

    #[test]
    fn inverse_transfer_round_trips(m in matrix(), x in 0.0f64..1280.0, y in 0.0f64..720.0) {
        let h = Homography::new(m).unwrap();
        let p = Point2::new(x, y);
        let back = h.inverse().unwrap().transfer(&h.transfer(&p).unwrap()).unwrap();
        prop_assert!((back - p).norm() < 1e-7);
        let id = h.compose(&h.inverse().unwrap()).unwrap();
        prop_assert!((id.transfer(&p).unwrap() - p).norm() < 1e-7);
    }

    #[test]
    fn homography_covariance_is_symmetric_psd(m in matrix()) {
        let h = Homography::new(m).unwrap();
        let matches: Vec<PointMatch> = grid().into_iter().map(|p| PointMatch::new(p, h.transfer(&p).unwrap())).collect();
        let cov = homography_covariance(&h, &matches).unwrap();
        prop_assert!((cov - cov.transpose()).norm() <= 1e-9 * cov.norm());
        let eig = cov.symmetric_eigen().eigenvalues;
        prop_assert!(eig.iter().all(|&e| e >= -1e-9 * cov.norm()));
    }
}

#[test]
fn intrinsics_matrix_inverts() {
    let k = Intrinsics::new(1234.5, PP);
    assert!((k.matrix() * k.inverse_matrix() - Matrix3::identity()).norm() < 1e-12);
}
