//! Evaluation: calibration errors against ground truth, CLEAR MOT and the USC
//! trajectory-coverage buckets.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::Point2;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraPose, GeometryError, Homography};
use crate::tracker::{TrackRecord, TrackStatus};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("record at frame {frame} lies outside the {frames}-frame sequence")]
    FrameIndexMismatch { frame: u64, frames: u64 },
    #[error("id {id} appears twice in frame {frame}")]
    DuplicateId { frame: u64, id: u64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Calibration error of one frame. Angles in degrees, focal in percent,
/// reprojection in pixels of the reference image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibErrorRecord {
    pub pan: f64,
    pub tilt: f64,
    pub focal: f64,
    pub reproj: f64,
}

/// Regular grid over the frame used for the reprojection error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub image_size: [f64; 2],
    pub spacing: f64,
}

impl Grid {
    pub fn new(image_size: [f64; 2], spacing: f64) -> Self {
        Self {
            image_size,
            spacing,
        }
    }

    pub fn points(&self) -> Vec<Point2<f64>> {
        let s = self.spacing.max(1.0);
        let mut out = Vec::new();
        let mut y = s / 2.0;
        while y < self.image_size[1] {
            let mut x = s / 2.0;
            while x < self.image_size[0] {
                out.push(Point2::new(x, y));
                x += s;
            }
            y += s;
        }
        out
    }
}

fn wrap_deg(a: f64) -> f64 {
    let a = a.rem_euclid(360.0);
    if a > 180.0 {
        360.0 - a
    } else {
        a
    }
}

/// Mean distance between grid points mapped by the two homographies.
pub fn grid_reprojection(est: &Homography, truth: &Homography, grid: &Grid) -> Result<f64> {
    let pts = grid.points();
    let mut sum = 0.0;
    for p in &pts {
        sum += (est.transfer(p)? - truth.transfer(p)?).norm();
    }
    Ok(sum / pts.len().max(1) as f64)
}

/// Pan, tilt and focal errors of `est` against `truth` plus the grid error of
/// the frame-to-reference homographies. Both poses must share a frame of
/// reference.
pub fn calib_errors(
    est: &CameraPose,
    est_h: &Homography,
    truth: &CameraPose,
    truth_h: &Homography,
    grid: &Grid,
) -> Result<CalibErrorRecord> {
    Ok(CalibErrorRecord {
        pan: wrap_deg((est.pan - truth.pan).to_degrees()),
        tilt: wrap_deg((est.tilt - truth.tilt).to_degrees()),
        focal: ((est.focal - truth.focal) / truth.focal).abs() * 100.0,
        reproj: grid_reprojection(est_h, truth_h, grid)?,
    })
}

/// Pedestrian box width over height.
pub const BOX_ASPECT: f64 = 0.41;

/// Foot point and height of one object in one frame, image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub frame: u64,
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub height: f64,
}

impl BoxRecord {
    /// `[x0, y0, x1, y1]` of the box standing on the foot point.
    pub fn bounds(&self) -> [f64; 4] {
        let hw = 0.5 * BOX_ASPECT * self.height;
        [self.x - hw, self.y - self.height, self.x + hw, self.y]
    }

    /// Confirmed tracks only; tentative and lost records are not hypotheses.
    pub fn from_track(r: &TrackRecord) -> Option<Self> {
        (r.status == TrackStatus::Confirmed).then_some(Self {
            frame: r.frame,
            id: r.track_id,
            x: r.image_x,
            y: r.image_y,
            height: r.height_px,
        })
    }
}

/// Intersection over union of two boxes.
pub fn voc(a: &BoxRecord, b: &BoxRecord) -> f64 {
    let (a, b) = (a.bounds(), b.bounds());
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Matching outcome of one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameEvents {
    pub frame: u64,
    /// `(gt id, hypothesis id, VOC)` of every true positive.
    pub matches: Vec<(u64, u64, f64)>,
    pub misses: Vec<u64>,
    pub false_positives: Vec<u64>,
    /// Ground-truth ids whose hypothesis changed in this frame.
    pub switches: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotReport {
    /// Percent.
    pub mota: f64,
    /// Mean VOC of true positives, percent.
    pub motp: f64,
    /// Misses over ground-truth objects, percent.
    pub fn_pct: f64,
    /// False positives over ground-truth objects, percent.
    pub fp_pct: f64,
    pub id_sw: usize,
    /// Coverage interruptions of ground-truth trajectories.
    pub tr_fr: usize,
    pub mt: f64,
    pub pt: f64,
    pub ml: f64,
    /// False positives per frame.
    pub faf: f64,
    pub frames: u64,
    pub gt_objects: usize,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub trajectories: usize,
}

fn by_frame(records: &[BoxRecord], frames: u64) -> Result<Vec<Vec<BoxRecord>>> {
    let mut out = vec![Vec::new(); frames as usize];
    for r in records {
        let slot = out
            .get_mut(r.frame as usize)
            .ok_or(MetricsError::FrameIndexMismatch {
                frame: r.frame,
                frames,
            })?;
        if slot.iter().any(|b: &BoxRecord| b.id == r.id) {
            return Err(MetricsError::DuplicateId {
                frame: r.frame,
                id: r.id,
            });
        }
        slot.push(*r);
    }
    for f in &mut out {
        f.sort_by_key(|b| b.id);
    }
    Ok(out)
}

/// Maximum-VOC assignment among pairs with VOC ≥ `threshold`.
fn assign(gt: &[&BoxRecord], hyp: &[&BoxRecord], threshold: f64) -> Vec<(usize, usize, f64)> {
    if gt.is_empty() || hyp.is_empty() {
        return Vec::new();
    }
    let overlap = |i: usize, j: usize| {
        let v = voc(gt[i], hyp[j]);
        if v >= threshold {
            v
        } else {
            0.0
        }
    };
    let scale = |v: f64| (v * 1e12).round() as i64;
    let transpose = gt.len() > hyp.len();
    let (rows, cols) = if transpose {
        (hyp.len(), gt.len())
    } else {
        (gt.len(), hyp.len())
    };
    let weights = Matrix::from_fn(rows, cols, |(r, c)| {
        scale(if transpose {
            overlap(c, r)
        } else {
            overlap(r, c)
        })
    });
    let (_, cols_of) = kuhn_munkres(&weights);
    cols_of
        .into_iter()
        .enumerate()
        .map(|(r, c)| if transpose { (c, r) } else { (r, c) })
        .filter_map(|(i, j)| {
            let v = overlap(i, j);
            (v > 0.0).then_some((i, j, v))
        })
        .collect()
}

/// Frame-by-frame CLEAR MOT matching. Correspondences from the previous frame
/// are kept while their VOC stays above `threshold`; the remaining objects are
/// assigned by Hungarian matching on VOC.
pub fn match_frames(
    gt: &[BoxRecord],
    hyp: &[BoxRecord],
    frames: u64,
    threshold: f64,
) -> Result<Vec<FrameEvents>> {
    let gt = by_frame(gt, frames)?;
    let hyp = by_frame(hyp, frames)?;
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let mut out = Vec::with_capacity(frames as usize);
    for (f, (g, h)) in gt.iter().zip(&hyp).enumerate() {
        let mut ev = FrameEvents {
            frame: f as u64,
            ..Default::default()
        };
        let mut g_done = vec![false; g.len()];
        let mut h_done = vec![false; h.len()];
        for (i, gb) in g.iter().enumerate() {
            let Some(&prev) = last.get(&gb.id) else {
                continue;
            };
            let Some(j) = h.iter().position(|hb| hb.id == prev) else {
                continue;
            };
            let v = voc(gb, &h[j]);
            if !h_done[j] && v >= threshold {
                g_done[i] = true;
                h_done[j] = true;
                ev.matches.push((gb.id, h[j].id, v));
            }
        }
        let gi: Vec<usize> = (0..g.len()).filter(|&i| !g_done[i]).collect();
        let hi: Vec<usize> = (0..h.len()).filter(|&j| !h_done[j]).collect();
        let gr: Vec<&BoxRecord> = gi.iter().map(|&i| &g[i]).collect();
        let hr: Vec<&BoxRecord> = hi.iter().map(|&j| &h[j]).collect();
        for (a, b, v) in assign(&gr, &hr, threshold) {
            let (gb, hb) = (gr[a], hr[b]);
            g_done[gi[a]] = true;
            h_done[hi[b]] = true;
            if last.get(&gb.id).is_some_and(|&p| p != hb.id) {
                ev.switches.push(gb.id);
            }
            ev.matches.push((gb.id, hb.id, v));
        }
        for &(gid, hid, _) in &ev.matches {
            last.insert(gid, hid);
        }
        ev.matches.sort_by_key(|m| m.0);
        ev.switches.sort_unstable();
        ev.misses = g
            .iter()
            .zip(&g_done)
            .filter(|(_, d)| !**d)
            .map(|(b, _)| b.id)
            .collect();
        ev.false_positives = h
            .iter()
            .zip(&h_done)
            .filter(|(_, d)| !**d)
            .map(|(b, _)| b.id)
            .collect();
        out.push(ev);
    }
    Ok(out)
}

/// Summary of a per-frame event log.
pub fn report_from_events(events: &[FrameEvents]) -> MotReport {
    let tp: usize = events.iter().map(|e| e.matches.len()).sum();
    let fneg: usize = events.iter().map(|e| e.misses.len()).sum();
    let fpos: usize = events.iter().map(|e| e.false_positives.len()).sum();
    let id_sw: usize = events.iter().map(|e| e.switches.len()).sum();
    let n = tp + fneg;
    let voc_sum: f64 = events
        .iter()
        .flat_map(|e| e.matches.iter().map(|m| m.2))
        .sum();
    let pct = |x: usize| {
        if n > 0 {
            100.0 * x as f64 / n as f64
        } else {
            0.0
        }
    };

    // Per-trajectory coverage and interruptions.
    let mut present: BTreeMap<u64, (usize, usize, bool, usize)> = BTreeMap::new();
    for e in events {
        let tracked: BTreeSet<u64> = e.matches.iter().map(|m| m.0).collect();
        for id in tracked.iter().copied().chain(e.misses.iter().copied()) {
            let s = present.entry(id).or_insert((0, 0, false, 0));
            let hit = tracked.contains(&id);
            s.0 += 1;
            if hit {
                if s.1 > 0 && !s.2 {
                    s.3 += 1;
                }
                s.1 += 1;
            }
            s.2 = hit;
        }
    }
    let traj = present.len();
    let (mut mt, mut ml) = (0usize, 0usize);
    let mut tr_fr = 0;
    for &(frames, hits, _, frag) in present.values() {
        let cov = hits as f64 / frames as f64;
        if cov > 0.8 {
            mt += 1;
        } else if cov < 0.2 {
            ml += 1;
        }
        tr_fr += frag;
    }
    let tpct = |x: usize| {
        if traj > 0 {
            100.0 * x as f64 / traj as f64
        } else {
            0.0
        }
    };
    MotReport {
        mota: if n > 0 {
            100.0 * (1.0 - (fneg + fpos + id_sw) as f64 / n as f64)
        } else {
            0.0
        },
        motp: if tp > 0 {
            100.0 * voc_sum / tp as f64
        } else {
            0.0
        },
        fn_pct: pct(fneg),
        fp_pct: pct(fpos),
        id_sw,
        tr_fr,
        mt: tpct(mt),
        pt: tpct(traj - mt - ml),
        ml: tpct(ml),
        faf: if events.is_empty() {
            0.0
        } else {
            fpos as f64 / events.len() as f64
        },
        frames: events.len() as u64,
        gt_objects: n,
        true_positives: tp,
        false_negatives: fneg,
        false_positives: fpos,
        trajectories: traj,
    }
}

/// CLEAR MOT and USC metrics of a hypothesis set over `frames` frames.
pub fn clear_mot(
    gt: &[BoxRecord],
    hyp: &[BoxRecord],
    frames: u64,
    threshold: f64,
) -> Result<(MotReport, Vec<FrameEvents>)> {
    let events = match_frames(gt, hyp, frames, threshold)?;
    Ok((report_from_events(&events), events))
}

/// Mostly tracked, partially tracked, mostly lost (percent) and false alarms
/// per frame.
pub fn usc_metric(
    gt: &[BoxRecord],
    hyp: &[BoxRecord],
    frames: u64,
    threshold: f64,
) -> Result<(f64, f64, f64, f64)> {
    let (r, _) = clear_mot(gt, hyp, frames, threshold)?;
    Ok((r.mt, r.pt, r.ml, r.faf))
}

#[derive(Serialize)]
struct EventRow {
    frame: u64,
    gt: usize,
    tp: usize,
    fn_: usize,
    fp: usize,
    id_sw: usize,
    voc_sum: f64,
    matches: String,
}

/// Per-frame event log as CSV, one row per frame.
pub fn write_events_csv<W: Write>(events: &[FrameEvents], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        w.serialize(EventRow {
            frame: e.frame,
            gt: e.matches.len() + e.misses.len(),
            tp: e.matches.len(),
            fn_: e.misses.len(),
            fp: e.false_positives.len(),
            id_sw: e.switches.len(),
            voc_sum: e.matches.iter().map(|m| m.2).sum(),
            matches: e
                .matches
                .iter()
                .map(|m| format!("{}:{}", m.0, m.1))
                .collect::<Vec<_>>()
                .join(" "),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
