use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{Matrix2, Matrix3, Point2};
use ptz_core::calibrate::{ekf_update_landmark, estimate_frame_homography, GainForm, RansacConfig};
use ptz_core::geometry::{estimate_homography_dlt, homography_covariance, Homography, PointMatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matches(n: usize, outliers: f64, rng: &mut ChaCha8Rng) -> (Homography, Vec<PointMatch>) {
    let h = Homography::new(Matrix3::new(
        1.02, 0.03, 14.0, -0.02, 0.99, -9.0, 3e-5, -2e-5, 1.0,
    ))
    .unwrap();
    let m = (0..n)
        .map(|_| {
            let src = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let dst = if rng.random_bool(outliers) {
                Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
            } else {
                let p = h.transfer(&src).unwrap();
                Point2::new(
                    p.x + rng.random_range(-1.0..1.0),
                    p.y + rng.random_range(-1.0..1.0),
                )
            };
            PointMatch::new(src, dst)
        })
        .collect();
    (h, m)
}

fn dlt(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("dlt");
    for n in [20, 200, 1000] {
        let (_, m) = matches(n, 0.0, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| estimate_homography_dlt(black_box(m)))
        });
    }
    g.finish();
}

fn covariance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, m) = matches(200, 0.0, &mut rng);
    c.bench_function("homography_covariance/200", |b| {
        b.iter(|| homography_covariance(black_box(&h), black_box(&m)))
    });
}

fn ransac(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, m) = matches(1000, 0.3, &mut rng);
    let cfg = RansacConfig::default();
    c.bench_function("ransac/1000_30pct_outliers", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            estimate_frame_homography(black_box(&m), &cfg, &mut rng)
        })
    });
}

fn ekf(c: &mut Criterion) {
    let h = Homography::new(Matrix3::new(
        1.02, 0.03, 14.0, -0.02, 0.99, -9.0, 3e-5, -2e-5, 1.0,
    ))
    .unwrap();
    let obs = Point2::new(300.0, 200.0);
    c.bench_function("ekf_update_landmark", |b| {
        b.iter(|| {
            let mut pos = Point2::new(320.0, 190.0);
            let mut cov = Matrix2::identity() * 4.0;
            ekf_update_landmark(
                &mut pos,
                &mut cov,
                black_box(&obs),
                &h,
                &Matrix2::identity(),
                GainForm::AsPrinted,
            )
        })
    });
}

criterion_group!(benches, dlt, covariance, ransac, ekf);
criterion_main!(benches);
