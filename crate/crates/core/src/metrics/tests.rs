use super::*;
use proptest::prelude::*;

fn b(frame: u64, id: u64, x: f64) -> BoxRecord {
    BoxRecord {
        frame,
        id,
        x,
        y: 200.0,
        height: 100.0,
    }
}

fn track(id: u64, x: f64, frames: std::ops::Range<u64>) -> Vec<BoxRecord> {
    frames.map(|f| b(f, id, x)).collect()
}

fn two_targets() -> Vec<BoxRecord> {
    let mut gt = track(1, 100.0, 0..10);
    gt.extend(track(2, 300.0, 0..10));
    gt
}

#[test]
fn identical_calibration_has_zero_error() {
    let pose = CameraPose::new(0.1, -0.2, 900.0);
    let h = Homography::new(nalgebra::Matrix3::new(
        1.0, 0.1, 3.0, 0.0, 1.1, -2.0, 1e-4, 0.0, 1.0,
    ))
    .unwrap();
    let grid = Grid::new([640.0, 480.0], 40.0);
    let e = calib_errors(&pose, &h, &pose, &h, &grid).unwrap();
    assert_eq!((e.pan, e.tilt, e.focal, e.reproj), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(grid.points().len(), 16 * 12);
}

#[test]
fn focal_misestimate_only_moves_focal_error() {
    let truth = CameraPose::new(0.3, -0.1, 1000.0);
    let est = CameraPose::new(0.3, -0.1, 1000.0 * 1.025);
    let h = Homography::identity();
    let e = calib_errors(&est, &h, &truth, &h, &Grid::new([640.0, 480.0], 20.0)).unwrap();
    assert!((e.focal - 2.5).abs() < 1e-9);
    assert_eq!((e.pan, e.tilt), (0.0, 0.0));
    let wrapped = calib_errors(
        &CameraPose::new(3.1, 0.0, 1.0),
        &h,
        &CameraPose::new(-3.1, 0.0, 1.0),
        &h,
        &Grid::new([10.0, 10.0], 5.0),
    )
    .unwrap();
    assert!((wrapped.pan - (2.0 * std::f64::consts::PI - 6.2).to_degrees()).abs() < 1e-9);
}

#[test]
fn grid_error_of_a_shift() {
    let shift = Homography::new(nalgebra::Matrix3::new(
        1.0, 0.0, 3.0, 0.0, 1.0, 4.0, 0.0, 0.0, 1.0,
    ))
    .unwrap();
    let e = grid_reprojection(
        &shift,
        &Homography::identity(),
        &Grid::new([640.0, 480.0], 32.0),
    )
    .unwrap();
    assert!((e - 5.0).abs() < 1e-9);
}

#[test]
fn voc_hand_values() {
    let a = b(0, 1, 100.0);
    assert_eq!(voc(&a, &a), 1.0);
    assert_eq!(voc(&a, &b(0, 2, 200.0)), 0.0);
    // Half-width shift: intersection w/2·h, union 3w/2·h.
    let half = 0.5 * BOX_ASPECT * 100.0;
    assert!((voc(&a, &b(0, 2, 100.0 + half)) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn perfect_hypothesis() {
    let gt = two_targets();
    let hyp: Vec<_> = gt
        .iter()
        .map(|r| BoxRecord {
            id: r.id + 10,
            ..*r
        })
        .collect();
    let (r, events) = clear_mot(&gt, &hyp, 10, 0.5).unwrap();
    assert_eq!(r.mota, 100.0);
    assert_eq!(r.motp, 100.0);
    assert_eq!(
        (r.id_sw, r.tr_fr, r.false_positives, r.false_negatives),
        (0, 0, 0, 0)
    );
    assert_eq!((r.mt, r.pt, r.ml, r.faf), (100.0, 0.0, 0.0, 0.0));
    assert_eq!(events.len(), 10);
}

#[test]
fn all_miss() {
    let (r, _) = clear_mot(&two_targets(), &[], 10, 0.5).unwrap();
    assert_eq!(r.mota, 0.0);
    assert_eq!(r.fn_pct, 100.0);
    assert_eq!(r.ml, 100.0);
    assert_eq!(r.motp, 0.0);
}

#[test]
fn one_switch() {
    // Target 2 is followed by hypothesis 20 and then by hypothesis 30.
    let gt = two_targets();
    let mut hyp = track(10, 100.0, 0..10);
    hyp.extend(track(20, 300.0, 0..5));
    hyp.extend(track(30, 300.0, 5..10));
    let (r, events) = clear_mot(&gt, &hyp, 10, 0.5).unwrap();
    assert_eq!(r.id_sw, 1);
    assert_eq!(events[5].switches, vec![2]);
    assert!((r.mota - 95.0).abs() < 1e-12);
    assert_eq!(r.tr_fr, 0);
}

#[test]
fn one_fragmentation() {
    let gt = track(1, 100.0, 0..10);
    let mut hyp = track(7, 100.0, 0..4);
    hyp.extend(track(7, 100.0, 6..10));
    let (r, _) = clear_mot(&gt, &hyp, 10, 0.5).unwrap();
    assert_eq!((r.tr_fr, r.id_sw, r.false_negatives), (1, 0, 2));
    assert!((r.mota - 80.0).abs() < 1e-12);
    assert_eq!(r.mt, 0.0);
    assert_eq!(r.pt, 100.0);
}

#[test]
fn half_covered_trajectory_is_partial() {
    let gt = two_targets();
    let mut hyp = track(10, 100.0, 0..10);
    hyp.extend(track(20, 300.0, 0..5));
    hyp.push(b(3, 99, 500.0));
    let (mt, pt, ml, faf) = usc_metric(&gt, &hyp, 10, 0.5).unwrap();
    assert_eq!((mt, pt, ml), (50.0, 50.0, 0.0));
    assert!((faf - 0.1).abs() < 1e-12);
}

#[test]
fn motp_averages_overlap() {
    let gt = track(1, 100.0, 0..4);
    let half = 0.5 * BOX_ASPECT * 100.0;
    let mut hyp = track(5, 100.0, 0..2);
    hyp.extend(track(5, 100.0 + half / 2.0, 2..4));
    // Quarter-width shift: intersection 3w/4·h, union 5w/4·h.
    let (r, _) = clear_mot(&gt, &hyp, 4, 0.5).unwrap();
    assert!((r.motp - 100.0 * (1.0 + 0.6) / 2.0).abs() < 1e-9);
}

#[test]
fn existing_correspondence_is_kept() {
    // A better-overlapping newcomer does not steal a still-valid match.
    let gt = track(1, 100.0, 0..2);
    let shift = 0.1 * BOX_ASPECT * 100.0;
    let mut hyp = track(5, 100.0 + shift, 0..2);
    hyp.push(b(1, 6, 100.0));
    let (r, events) = clear_mot(&gt, &hyp, 2, 0.5).unwrap();
    assert_eq!(r.id_sw, 0);
    assert_eq!(events[1].matches[0].1, 5);
    assert_eq!(events[1].false_positives, vec![6]);
}

#[test]
fn frame_outside_sequence_is_rejected() {
    let err = clear_mot(&track(1, 0.0, 0..5), &[], 4, 0.5).unwrap_err();
    assert!(matches!(
        err,
        MetricsError::FrameIndexMismatch {
            frame: 4,
            frames: 4
        }
    ));
    let dup = vec![b(0, 1, 0.0), b(0, 1, 5.0)];
    assert!(matches!(
        clear_mot(&dup, &[], 1, 0.5),
        Err(MetricsError::DuplicateId { .. })
    ));
}

#[test]
fn confirmed_tracks_become_boxes() {
    let rec = TrackRecord {
        frame: 3,
        track_id: 9,
        x: 1.0,
        y: 2.0,
        image_x: 50.0,
        image_y: 60.0,
        height_px: 80.0,
        status: TrackStatus::Confirmed,
    };
    assert_eq!(
        BoxRecord::from_track(&rec).unwrap().bounds(),
        [50.0 - 16.4, -20.0, 50.0 + 16.4, 60.0]
    );
    assert!(BoxRecord::from_track(&TrackRecord {
        status: TrackStatus::Tentative,
        ..rec
    })
    .is_none());
}

/// Random ground truth and a jittered, partially dropped, relabeled hypothesis.
fn scene() -> impl Strategy<Value = (Vec<BoxRecord>, Vec<BoxRecord>)> {
    (1usize..5, 2u64..15, any::<u64>()).prop_map(|(targets, frames, seed)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut gt = Vec::new();
        let mut hyp = Vec::new();
        for t in 0..targets as u64 {
            let x0 = rng.random_range(0.0..600.0);
            for f in 0..frames {
                if rng.random_bool(0.9) {
                    let g = BoxRecord {
                        frame: f,
                        id: t,
                        x: x0 + 3.0 * f as f64,
                        y: 300.0,
                        height: 80.0,
                    };
                    gt.push(g);
                    if rng.random_bool(0.8) {
                        let id = if rng.random_bool(0.1) {
                            100 + t
                        } else {
                            50 + t
                        };
                        hyp.push(BoxRecord {
                            id,
                            x: g.x + rng.random_range(-12.0..12.0),
                            ..g
                        });
                    }
                }
            }
        }
        (gt, hyp)
    })
}

fn frames_of(gt: &[BoxRecord], hyp: &[BoxRecord]) -> u64 {
    gt.iter().chain(hyp).map(|r| r.frame + 1).max().unwrap_or(0)
}

proptest! {
    #[test]
    fn relabeling_tracks_keeps_scores((gt, hyp) in scene(), offset in 1u64..1000) {
        let n = frames_of(&gt, &hyp);
        let (a, _) = clear_mot(&gt, &hyp, n, 0.5).unwrap();
        let renamed: Vec<_> = hyp.iter().map(|r| BoxRecord { id: r.id * 7 + offset, ..*r }).collect();
        let (b, _) = clear_mot(&gt, &renamed, n, 0.5).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn extra_false_positives_never_raise_mota((gt, hyp) in scene(), frame in 0u64..15) {
        let n = frames_of(&gt, &hyp).max(1);
        let (a, _) = clear_mot(&gt, &hyp, n, 0.5).unwrap();
        let mut more = hyp.clone();
        more.push(BoxRecord { frame: frame % n, id: 10_000, x: 5000.0, y: 0.0, height: 50.0 });
        let (b, _) = clear_mot(&gt, &more, n, 0.5).unwrap();
        prop_assert!(b.mota <= a.mota);
        prop_assert!(a.mota <= 100.0);
        let total = if a.trajectories > 0 { 100.0 } else { 0.0 };
        prop_assert!((a.mt + a.pt + a.ml - total).abs() < 1e-9);
    }

    #[test]
    fn event_log_reproduces_the_report((gt, hyp) in scene()) {
        let n = frames_of(&gt, &hyp);
        let (r, events) = clear_mot(&gt, &hyp, n, 0.5).unwrap();
        let mut buf = Vec::new();
        write_events_csv(&events, &mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        let (mut gt_n, mut tp, mut fneg, mut fp, mut sw, mut vs) = (0usize, 0usize, 0usize, 0usize, 0usize, 0.0);
        for row in rd.records() {
            let row = row.unwrap();
            let num = |i: usize| row[i].parse::<usize>().unwrap();
            gt_n += num(1);
            tp += num(2);
            fneg += num(3);
            fp += num(4);
            sw += num(5);
            vs += row[6].parse::<f64>().unwrap();
        }
        prop_assert_eq!(gt_n, gt.len());
        prop_assert_eq!((tp, fneg, fp, sw), (r.true_positives, r.false_negatives, r.false_positives, r.id_sw));
        if gt_n > 0 {
            prop_assert!((100.0 * (1.0 - (fneg + fp + sw) as f64 / gt_n as f64) - r.mota).abs() < 1e-9);
        }
        if tp > 0 {
            prop_assert!((100.0 * vs / tp as f64 - r.motp).abs() < 1e-6);
        }
    }
}
