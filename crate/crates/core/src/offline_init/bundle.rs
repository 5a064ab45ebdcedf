use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Point2, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{FocalTable, InitError};
use crate::geometry::{division_jacobian, rotation_from_pan_tilt, Intrinsics, PointMatch};
use crate::scene_map::ActuatorReading;

/// One keyframe of the bundle problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleView {
    pub id: u32,
    pub reading: ActuatorReading,
}

/// Correspondences between keyframes `a` and `b` (indices into the view list);
/// `src` lies in `a`, `dst` in `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPairMatches {
    pub a: usize,
    pub b: usize,
    pub matches: Vec<PointMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleProblem {
    pub views: Vec<BundleView>,
    pub pairs: Vec<ViewPairMatches>,
    /// Shared principal point.
    pub pp: Point2<f64>,
    /// Index of the reference keyframe, whose rotation is held at identity.
    pub reference: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSolution {
    pub rotations: Vec<Matrix3<f64>>,
    pub focals: Vec<f64>,
    /// Root mean square of the symmetric transfer residual vectors, pixels.
    pub rms: f64,
    pub initial_rms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Total squared residual after every accepted step, starting with the initial guess.
    pub cost_history: Vec<f64>,
}

impl BundleSolution {
    pub fn intrinsics(&self, i: usize, pp: Point2<f64>) -> Intrinsics {
        Intrinsics::new(self.focals[i], pp)
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Residual of transferring `x_i` (view i) into view j against `x_j`, with the
/// Jacobians with respect to (δ_i, log f_i, δ_j, log f_j). Rotations are
/// perturbed on the left, `R ← exp([δ]×) R`.
pub(crate) struct Transfer {
    pub r: Vector2<f64>,
    pub d_rot_i: Matrix2x3<f64>,
    pub d_f_i: Vector2<f64>,
    pub d_rot_j: Matrix2x3<f64>,
    pub d_f_j: Vector2<f64>,
}

pub(crate) fn transfer(
    r_i: &Matrix3<f64>,
    k_i: &Intrinsics,
    r_j: &Matrix3<f64>,
    k_j: &Intrinsics,
    x_i: &Point2<f64>,
    x_j: &Point2<f64>,
) -> Option<Transfer> {
    let q = k_i.inverse_matrix() * Vector3::new(x_i.x, x_i.y, 1.0);
    let rel = r_j * r_i.transpose();
    let y = rel * q;
    let kj = k_j.matrix();
    let z = kj * y;
    if z.z.abs() < 1e-12 * (z.x.abs() + z.y.abs() + z.z.abs()) {
        return None;
    }
    let jd = division_jacobian(&z);
    let a = kj * rel;
    let r = Vector2::new(z.x / z.z - x_j.x, z.y / z.z - x_j.y);
    Some(Transfer {
        r,
        d_rot_i: jd * a * skew(&q),
        d_f_i: jd * a * Vector3::new(-q.x, -q.y, 0.0),
        d_rot_j: jd * (-kj * skew(&y)),
        d_f_j: jd * Vector3::new(k_j.focal * y.x, k_j.focal * y.y, 0.0),
    })
}

struct Layout {
    rot: Vec<Option<usize>>,
    focal: Vec<usize>,
    len: usize,
}

impl Layout {
    fn new(n: usize, reference: usize) -> Self {
        let mut rot = Vec::with_capacity(n);
        let mut focal = Vec::with_capacity(n);
        let mut off = 0;
        for i in 0..n {
            if i == reference {
                rot.push(None);
            } else {
                rot.push(Some(off));
                off += 3;
            }
            focal.push(off);
            off += 1;
        }
        Self {
            rot,
            focal,
            len: off,
        }
    }
}

fn check_connected(problem: &BundleProblem) -> Result<(), InitError> {
    let n = problem.views.len();
    let mut adj = vec![Vec::new(); n];
    for p in &problem.pairs {
        if p.a >= n || p.b >= n {
            return Err(InitError::InvalidProblem(format!(
                "pair ({}, {}) out of range",
                p.a, p.b
            )));
        }
        if p.matches.len() >= 4 {
            adj[p.a].push(p.b);
            adj[p.b].push(p.a);
        }
    }
    let mut seen = vec![false; n];
    seen[problem.reference] = true;
    let mut queue = VecDeque::from([problem.reference]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(i) => Err(InitError::DisconnectedGraph(problem.views[i].id)),
        None => Ok(()),
    }
}

/// Initial rotations (relative to the reference keyframe) and focals from the
/// actuator readings.
pub fn initial_guess(problem: &BundleProblem, table: &FocalTable) -> (Vec<Matrix3<f64>>, Vec<f64>) {
    let rot = |r: &ActuatorReading| {
        rotation_from_pan_tilt(r.pan_deg.to_radians(), r.tilt_deg.to_radians())
    };
    let r_ref = rot(&problem.views[problem.reference].reading);
    let mut rotations: Vec<_> = problem
        .views
        .iter()
        .map(|v| rot(&v.reading) * r_ref.transpose())
        .collect();
    rotations[problem.reference] = Matrix3::identity();
    let focals = problem
        .views
        .iter()
        .map(|v| table.focal_at(v.reading.zoom))
        .collect();
    (rotations, focals)
}

struct State<'a> {
    problem: &'a BundleProblem,
    rotations: Vec<Matrix3<f64>>,
    focals: Vec<f64>,
}

impl State<'_> {
    fn intrinsics(&self, i: usize) -> Intrinsics {
        Intrinsics::new(self.focals[i], self.problem.pp)
    }

    /// Visits every symmetric-transfer residual as (view from, view to, transfer).
    fn for_each<F: FnMut(usize, usize, &Transfer)>(&self, mut f: F) -> usize {
        let mut failed = 0;
        for p in &self.problem.pairs {
            let (ka, kb) = (self.intrinsics(p.a), self.intrinsics(p.b));
            let (ra, rb) = (&self.rotations[p.a], &self.rotations[p.b]);
            for m in &p.matches {
                match transfer(ra, &ka, rb, &kb, &m.src, &m.dst) {
                    Some(t) => f(p.a, p.b, &t),
                    None => failed += 1,
                }
                match transfer(rb, &kb, ra, &ka, &m.dst, &m.src) {
                    Some(t) => f(p.b, p.a, &t),
                    None => failed += 1,
                }
            }
        }
        failed
    }

    fn cost(&self) -> f64 {
        let mut c = 0.0;
        let failed = self.for_each(|_, _, t| c += t.r.norm_squared());
        if failed > 0 {
            f64::INFINITY
        } else {
            c
        }
    }
}

fn residual_count(problem: &BundleProblem) -> usize {
    problem.pairs.iter().map(|p| 2 * p.matches.len()).sum()
}

/// Levenberg–Marquardt over per-view rotation increments and log focal length,
/// minimizing the symmetric transfer error of all cross-view matches.
///
/// Only cost-decreasing steps are accepted. When the iteration budget runs out
/// the best solution so far is returned with `converged = false`.
pub fn bundle_adjust(
    problem: &BundleProblem,
    table: &FocalTable,
    config: &BundleConfig,
) -> Result<BundleSolution, InitError> {
    let n = problem.views.len();
    if n == 0 || problem.reference >= n {
        return Err(InitError::InvalidProblem(
            "reference keyframe out of range".into(),
        ));
    }
    check_connected(problem)?;
    let (rotations, focals) = initial_guess(problem, table);
    let layout = Layout::new(n, problem.reference);
    let mut state = State {
        problem,
        rotations,
        focals,
    };
    let count = residual_count(problem).max(1) as f64;
    let mut cost = state.cost();
    if !cost.is_finite() {
        return Err(InitError::InvalidProblem(
            "initial guess maps matches to infinity".into(),
        ));
    }
    let initial_rms = (cost / count).sqrt();
    let mut history = vec![cost];
    let mut lambda = config.initial_damping;
    let mut converged = n == 1 || cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let mut jtj = DMatrix::<f64>::zeros(layout.len, layout.len);
        let mut jtr = DVector::<f64>::zeros(layout.len);
        state.for_each(|i, j, t| {
            let mut cols: [(usize, Vector2<f64>); 8] = [(usize::MAX, Vector2::zeros()); 8];
            let mut k = 0;
            for (view, d_rot, d_f) in [(i, &t.d_rot_i, &t.d_f_i), (j, &t.d_rot_j, &t.d_f_j)] {
                if let Some(off) = layout.rot[view] {
                    for c in 0..3 {
                        cols[k] = (off + c, d_rot.column(c).into_owned());
                        k += 1;
                    }
                }
                cols[k] = (layout.focal[view], *d_f);
                k += 1;
            }
            for a in 0..k {
                let (pa, ja) = cols[a];
                jtr[pa] += ja.dot(&t.r);
                for &(pb, jb) in &cols[..k] {
                    jtj[(pa, pb)] += ja.dot(&jb);
                }
            }
        });

        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..layout.len {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let mut trial = State {
                problem,
                rotations: state.rotations.clone(),
                focals: state.focals.clone(),
            };
            for v in 0..n {
                if let Some(off) = layout.rot[v] {
                    let delta = Vector3::new(step[off], step[off + 1], step[off + 2]);
                    trial.rotations[v] = Rotation3::new(delta).into_inner() * trial.rotations[v];
                }
                trial.focals[v] *= step[layout.focal[v]].exp();
            }
            let trial_cost = trial.cost();
            if trial_cost < cost {
                let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                state = trial;
                cost = trial_cost;
                history.push(cost);
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if rel < config.relative_tolerance || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No decrease at any damping: at a (numerical) minimum.
            converged = true;
        }
    }

    Ok(BundleSolution {
        rotations: state.rotations,
        focals: state.focals,
        rms: (cost / count).sqrt(),
        initial_rms,
        iterations,
        converged,
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose_rotation_homography;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const PP: Point2<f64> = Point2::new(320.0, 240.0);

    fn grid_problem(noise: f64, seed: u64) -> (BundleProblem, Vec<Matrix3<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut views = Vec::new();
        let mut rots = Vec::new();
        let mut focals = Vec::new();
        for (i, (p, t)) in [-8.0, 0.0, 8.0]
            .iter()
            .flat_map(|p| [-6.0, 0.0, 6.0].map(|t| (*p, t)))
            .enumerate()
        {
            let zoom = 1.0 + 0.1 * (i % 3) as f64;
            views.push(BundleView {
                id: i as u32,
                // Readings are off by up to half a degree and a few percent of zoom.
                reading: ActuatorReading::new(
                    p + rng.random_range(-0.5..0.5),
                    t + rng.random_range(-0.5..0.5),
                    zoom * rng.random_range(0.97..1.03),
                ),
            });
            rots.push(rotation_from_pan_tilt(
                f64::to_radians(p),
                f64::to_radians(t),
            ));
            focals.push(800.0 * zoom);
        }
        let r4t = rots[4].transpose();
        let rots: Vec<_> = rots.iter().map(|r| r * r4t).collect();
        let gauss = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut pairs = Vec::new();
        for a in 0..views.len() {
            for b in a + 1..views.len() {
                let ka = Intrinsics::new(focals[a], PP);
                let kb = Intrinsics::new(focals[b], PP);
                let h = compose_rotation_homography(&kb, &rots[b], &rots[a], &ka).unwrap();
                let mut matches = Vec::new();
                for _ in 0..200 {
                    let p = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                    let Ok(q) = h.transfer(&p) else { continue };
                    if q.x < 0.0 || q.y < 0.0 || q.x > 640.0 || q.y > 480.0 {
                        continue;
                    }
                    let jit = |r: &mut ChaCha8Rng| if noise > 0.0 { gauss.sample(r) } else { 0.0 };
                    let src = Point2::new(p.x + jit(&mut rng), p.y + jit(&mut rng));
                    let dst = Point2::new(q.x + jit(&mut rng), q.y + jit(&mut rng));
                    matches.push(PointMatch::new(src, dst));
                }
                if matches.len() >= 10 {
                    pairs.push(ViewPairMatches { a, b, matches });
                }
            }
        }
        (
            BundleProblem {
                views,
                pairs,
                pp: PP,
                reference: 4,
            },
            rots,
            focals,
        )
    }

    fn table() -> FocalTable {
        FocalTable::linear(800.0)
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let ri = rotation_from_pan_tilt(0.1, -0.05);
        let rj = rotation_from_pan_tilt(-0.07, 0.02);
        let ki = Intrinsics::new(900.0, PP);
        let kj = Intrinsics::new(1200.0, PP);
        let xi = Point2::new(200.0, 300.0);
        let xj = Point2::new(0.0, 0.0);
        let t = transfer(&ri, &ki, &rj, &kj, &xi, &xj).unwrap();
        let eps = 1e-6;
        let r_at = |ri: &Matrix3<f64>, fi: f64, rj: &Matrix3<f64>, fj: f64| {
            transfer(
                ri,
                &Intrinsics::new(fi, PP),
                rj,
                &Intrinsics::new(fj, PP),
                &xi,
                &xj,
            )
            .unwrap()
            .r
        };
        for c in 0..3 {
            let mut d = Vector3::zeros();
            d[c] = eps;
            let plus = Rotation3::new(d).into_inner();
            let minus = Rotation3::new(-d).into_inner();
            let num_i = (r_at(&(plus * ri), 900.0, &rj, 1200.0)
                - r_at(&(minus * ri), 900.0, &rj, 1200.0))
                / (2.0 * eps);
            let num_j = (r_at(&ri, 900.0, &(plus * rj), 1200.0)
                - r_at(&ri, 900.0, &(minus * rj), 1200.0))
                / (2.0 * eps);
            assert!((num_i - t.d_rot_i.column(c)).norm() < 1e-4 * num_i.norm().max(1.0));
            assert!((num_j - t.d_rot_j.column(c)).norm() < 1e-4 * num_j.norm().max(1.0));
        }
        let num_fi = (r_at(&ri, 900.0 * eps.exp(), &rj, 1200.0)
            - r_at(&ri, 900.0 * (-eps).exp(), &rj, 1200.0))
            / (2.0 * eps);
        let num_fj = (r_at(&ri, 900.0, &rj, 1200.0 * eps.exp())
            - r_at(&ri, 900.0, &rj, 1200.0 * (-eps).exp()))
            / (2.0 * eps);
        assert!((num_fi - t.d_f_i).norm() < 1e-4 * num_fi.norm().max(1.0));
        assert!((num_fj - t.d_f_j).norm() < 1e-4 * num_fj.norm().max(1.0));
    }

    #[test]
    fn noiseless_grid_is_recovered() {
        let (problem, rots, focals) = grid_problem(0.0, 1);
        let sol = bundle_adjust(&problem, &table(), &BundleConfig::default()).unwrap();
        assert!(sol.rms < 1e-8, "rms {}", sol.rms);
        for i in 0..9 {
            assert!(
                ((sol.focals[i] - focals[i]) / focals[i]).abs() < 1e-6,
                "view {i}: {} vs {}",
                sol.focals[i],
                focals[i]
            );
            assert!((sol.rotations[i] - rots[i]).norm() < 1e-6);
        }
        assert_eq!(sol.rotations[4], Matrix3::identity());
    }

    #[test]
    fn accepted_steps_never_increase_cost() {
        let (problem, _, _) = grid_problem(1.0, 2);
        let sol = bundle_adjust(&problem, &table(), &BundleConfig::default()).unwrap();
        for w in sol.cost_history.windows(2) {
            assert!(w[1] < w[0]);
        }
        // Both endpoints carry σ = 1 px per axis, so |r|² averages about 4.
        assert!(sol.rms < 2.5 && sol.rms > 1.5, "rms {}", sol.rms);
    }

    #[test]
    fn single_keyframe_is_trivial() {
        let problem = BundleProblem {
            views: vec![BundleView {
                id: 0,
                reading: ActuatorReading::new(3.0, -2.0, 1.5),
            }],
            pairs: Vec::new(),
            pp: PP,
            reference: 0,
        };
        let sol = bundle_adjust(&problem, &table(), &BundleConfig::default()).unwrap();
        assert_eq!(sol.rotations[0], Matrix3::identity());
        assert_eq!(sol.focals[0], 1200.0);
        assert_eq!(sol.rms, 0.0);
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let (mut problem, _, _) = grid_problem(0.0, 3);
        problem.pairs.retain(|p| p.a != 8 && p.b != 8);
        assert!(matches!(
            bundle_adjust(&problem, &table(), &BundleConfig::default()),
            Err(InitError::DisconnectedGraph(8))
        ));
    }
}
