use std::f64::consts::PI;

use super::{Detection, Projection};

/// Per-track association weights `(detection index, β)` and the detections
/// that fall inside no gate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    pub weights: Vec<Vec<(usize, f64)>>,
    pub unassociated: Vec<usize>,
}

/// Squared Mahalanobis distance and Gaussian likelihood of every gated pair.
fn gated_pairs(
    tracks: &[Option<Projection>],
    dets: &[Detection],
    gate: f64,
) -> Vec<Vec<(usize, f64, f64)>> {
    tracks
        .iter()
        .map(|proj| {
            let Some(proj) = proj else { return Vec::new() };
            let Some(s_inv) = proj.s.try_inverse() else {
                return Vec::new();
            };
            let norm = 1.0 / (2.0 * PI * proj.s.determinant().max(f64::MIN_POSITIVE).sqrt());
            dets.iter()
                .enumerate()
                .filter_map(|(j, d)| {
                    let nu = d.p - proj.p;
                    let d2 = (nu.transpose() * s_inv * nu)[0];
                    (d2 <= gate * gate).then(|| (j, d2, norm * (-0.5 * d2).exp()))
                })
                .collect()
        })
        .collect()
}

fn unassociated(gated: &[Vec<(usize, f64, f64)>], n: usize) -> Vec<usize> {
    let mut used = vec![false; n];
    for row in gated {
        for &(j, _, _) in row {
            used[j] = true;
        }
    }
    (0..n).filter(|&j| !used[j]).collect()
}

/// Cheap-JPDAF weights `β_ij = G_ij / (S_Ti + S_Dj − G_ij + B)`, where `S_Ti`
/// and `S_Dj` are the likelihood sums over the track's row and the detection's
/// column and `B = bias_factor · max_i peak_i`. The remaining mass
/// `1 − Σ_j β_ij` is the probability that the track was not detected.
pub fn associate_cheap_jpdaf(
    tracks: &[Option<Projection>],
    dets: &[Detection],
    gate: f64,
    bias_factor: f64,
) -> Association {
    let gated = gated_pairs(tracks, dets, gate);
    let peak = tracks
        .iter()
        .flatten()
        .map(|p| 1.0 / (2.0 * PI * p.s.determinant().max(f64::MIN_POSITIVE).sqrt()))
        .fold(0.0, f64::max);
    let bias = bias_factor * peak;
    let mut s_d = vec![0.0; dets.len()];
    for row in &gated {
        for &(j, _, g) in row {
            s_d[j] += g;
        }
    }
    let weights = gated
        .iter()
        .map(|row| {
            let s_t: f64 = row.iter().map(|&(_, _, g)| g).sum();
            row.iter()
                .map(|&(j, _, g)| {
                    let den = s_t + s_d[j] - g + bias;
                    (j, if den > 0.0 { g / den } else { 0.0 })
                })
                .collect()
        })
        .collect();
    Association {
        weights,
        unassociated: unassociated(&gated, dets.len()),
    }
}

/// Global nearest-neighbour baseline: gated pairs are taken greedily in order
/// of increasing Mahalanobis distance, each with weight one.
pub fn associate_greedy(
    tracks: &[Option<Projection>],
    dets: &[Detection],
    gate: f64,
) -> Association {
    let gated = gated_pairs(tracks, dets, gate);
    let mut pairs: Vec<(f64, usize, usize)> = gated
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |&(j, d2, _)| (d2, i, j)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut weights = vec![Vec::new(); tracks.len()];
    let mut det_used = vec![false; dets.len()];
    for (_, i, j) in pairs {
        if weights[i].is_empty() && !det_used[j] {
            weights[i].push((j, 1.0));
            det_used[j] = true;
        }
    }
    Association {
        weights,
        unassociated: unassociated(&gated, dets.len()),
    }
}
