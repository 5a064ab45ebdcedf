use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ptz_core::calibrate::Calibrator;
use ptz_core::pipeline::{initialize, run, Execution, RunConfig};
use ptz_core::simulator::{Scenario, Simulator};

fn sim(frames: u64) -> Simulator {
    let mut s = Scenario::builtin("throughput").unwrap();
    s.frames = frames;
    Simulator::new(s).unwrap()
}

fn calibrate_frame(c: &mut Criterion) {
    let sim = sim(20);
    let cfg = RunConfig::default();
    let init = initialize(&sim, &cfg).unwrap();
    let frame = sim.render_frame(10).unwrap();
    c.bench_function("calibrate_frame/1000_landmarks", |b| {
        b.iter(|| {
            let mut map = init.map.clone();
            let mut cal = Calibrator::new(cfg.calibration, init.registration.h_w.clone(), 0);
            cal.calibrate_frame(
                frame.frame,
                black_box(&frame.observations),
                &frame.reading,
                &mut map,
            )
        })
    });
}

fn stream(c: &mut Criterion) {
    let sim = sim(30);
    let cfg = RunConfig::default();
    let init = initialize(&sim, &cfg).unwrap();
    let mut g = c.benchmark_group("stream/30_frames");
    g.sample_size(10);
    for execution in [Execution::Sequential, Execution::Parallel] {
        let cfg = RunConfig {
            execution,
            ..cfg.clone()
        };
        g.bench_function(format!("{execution:?}").to_lowercase(), |b| {
            b.iter(|| run(&sim, &init, &cfg))
        });
    }
    g.finish();
}

criterion_group!(benches, calibrate_frame, stream);
criterion_main!(benches);
