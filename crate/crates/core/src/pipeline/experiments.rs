use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use super::{initialize, run, Result, RunConfig};
use crate::geometry::{rotation_from_pan_tilt, Homography, Intrinsics};
use crate::simulator::{Scenario, Simulator};
use crate::worldproj::{build_homology, calibrate_mu, estimate_scale};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Landmarks sampled from the view map per frame.
    LandmarkCount,
    RansacThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub mean_reproj_px: f64,
    pub failure_rate: f64,
    pub mean_inliers: f64,
}

/// Calibration error against one parameter, one run per (seed, value). The
/// map is initialized once per seed with the base configuration.
pub fn sweep(
    scenario: &Scenario,
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRecord>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let sim = Simulator::new(scenario.clone().with_seed(seed))?;
        let init = initialize(&sim, base)?;
        for &value in values {
            let mut cfg = base.clone();
            cfg.tracking = false;
            cfg.seed = base.seed.wrapping_add(seed);
            match axis {
                SweepAxis::LandmarkCount => {
                    cfg.calibration.matching.sample_size = value.round().max(1.0) as usize
                }
                SweepAxis::RansacThreshold => cfg.calibration.ransac.threshold_px = value,
            }
            let r = run(&sim, &init, &cfg)?;
            let n = r.diagnostics.len().max(1) as f64;
            out.push(SweepRecord {
                axis,
                value,
                seed,
                mean_reproj_px: r.calibration.mean_reproj_px,
                failure_rate: r.calibration.failure_rate,
                mean_inliers: r.diagnostics.iter().map(|d| d.inliers as f64).sum::<f64>() / n,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleProbeRecord {
    pub pan_deg: f64,
    pub tilt_deg: f64,
    pub focal: f64,
    pub points: usize,
    /// Head error over projected height.
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

/// One foot position of the probe grid, image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleProbePoint {
    pub pan_deg: f64,
    pub tilt_deg: f64,
    pub focal: f64,
    pub foot_x: f64,
    pub foot_y: f64,
    pub head_x: f64,
    pub head_y: f64,
    pub true_head_x: f64,
    pub true_head_y: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleProbe {
    pub records: Vec<ScaleProbeRecord>,
    pub points: Vec<ScaleProbePoint>,
}

/// Predicted head error of the homology over a pose grid with the exact
/// (noise-free) world-to-frame chain. The cross-ratio is calibrated once in
/// the reference keyframe.
pub fn scale_probe(
    sim: &Simulator,
    config: &RunConfig,
    pans_deg: &[f64],
    tilts_deg: &[f64],
    focals: &[f64],
) -> Result<ScaleProbe> {
    let pp = sim.principal_point();
    let m = sim.ground_matrix();
    let k_r = sim.reference_intrinsics();
    let g_ref = Homography::new(k_r.matrix() * sim.reference_rotation() * m)?;
    let (foot, head) = sim.reference_person(&pp, config.person_height_m)?;
    let mu = calibrate_mu(&g_ref, &k_r, &foot, &head, config.line_convention)?;
    let [w, h] = sim.scenario().camera.image_size;
    let mut out = ScaleProbe::default();
    for &p in pans_deg {
        for &t in tilts_deg {
            for &f in focals {
                let k = Intrinsics::new(f, pp);
                let r = rotation_from_pan_tilt(p.to_radians(), t.to_radians());
                let g = Homography::new(k.matrix() * r * m)?;
                let hom = build_homology(&g, &k, mu, config.line_convention)?;
                let g_inv = g.inverse()?;
                let mut errs = Vec::new();
                for i in 0..5 {
                    for j in 0..5 {
                        let px =
                            Point2::new(w * (0.1 + 0.2 * i as f64), h * (0.1 + 0.2 * j as f64));
                        let Ok(pred) = estimate_scale(&hom, &px) else {
                            continue;
                        };
                        let Ok(world) = g_inv.transfer(&px) else {
                            continue;
                        };
                        let Some((tf, th)) =
                            sim.person_image(&k, &r, &world, config.person_height_m)
                        else {
                            continue;
                        };
                        let e = (pred.head - th).norm() / (th - tf).norm();
                        errs.push(e);
                        out.points.push(ScaleProbePoint {
                            pan_deg: p,
                            tilt_deg: t,
                            focal: f,
                            foot_x: px.x,
                            foot_y: px.y,
                            head_x: pred.head.x,
                            head_y: pred.head.y,
                            true_head_x: th.x,
                            true_head_y: th.y,
                            rel_err: e,
                        });
                    }
                }
                out.records.push(ScaleProbeRecord {
                    pan_deg: p,
                    tilt_deg: t,
                    focal: f,
                    points: errs.len(),
                    max_rel_err: errs.iter().copied().fold(0.0, f64::max),
                    mean_rel_err: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
                });
            }
        }
    }
    Ok(out)
}
