//! Minimum-curvature raceline and curvature-limited speed profiles.
//!
//! The raceline is parameterized by a lateral offset `alpha[i]` along the
//! centerline's left normal at every sample. The objective is the discrete
//! bending energy `Σ κ_i² · ds_i`, where `κ_i` is the circumscribed-circle
//! curvature of the offset points. Each iteration linearizes the curvature
//! residuals around the current offsets, which turns the objective into a
//! quadratic form in the offset step, and takes a projected Newton step on
//! the free variables of the box `|alpha| ≤ alpha_max`. A projected gradient
//! step is the fallback whenever the Newton step fails to descend. Every
//! accepted step strictly decreases the objective.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::track::{circumscribed_curvature, resample_closed, Lane, LaneId, TrackModel};

#[derive(Debug, Clone)]
pub struct RacelineProblem {
    pub track: TrackModel,
    /// Per-sample bound on |alpha|.
    pub alpha_max: Vec<f64>,
    pub car_half_width: f64,
    pub iterations: usize,
    /// Initial line-search step.
    pub step_size: f64,
}

impl RacelineProblem {
    /// Uses the full track width less the car half width.
    pub fn new(track: TrackModel, car_half_width: f64) -> Self {
        let alpha_max = track
            .half_width_left
            .iter()
            .zip(&track.half_width_right)
            .map(|(l, r)| (l.min(*r) - car_half_width).max(0.0))
            .collect();
        Self {
            track,
            alpha_max,
            car_half_width,
            iterations: 2000,
            step_size: 1.0,
        }
    }

    pub fn with_uniform_alpha_max(mut self, alpha_max: f64) -> Self {
        self.alpha_max = vec![alpha_max; self.track.len()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.track;
        if self.alpha_max.len() != t.len() {
            return Err(Error::Config("alpha_max length must match the track".into()));
        }
        for i in 0..t.len() {
            let room = t.half_width_left[i].min(t.half_width_right[i]) - self.car_half_width;
            if !(self.alpha_max[i] >= 0.0) || self.alpha_max[i] > room + 1e-12 {
                return Err(Error::Config(format!(
                    "alpha_max[{i}] = {} exceeds the usable half width {room}",
                    self.alpha_max[i]
                )));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeedLimits {
    pub v_cap: f64,
    pub a_lat_max: f64,
    pub a_accel_max: f64,
    pub a_brake_max: f64,
}

impl Default for SpeedLimits {
    fn default() -> Self {
        Self {
            v_cap: 50.0,
            a_lat_max: 12.0,
            a_accel_max: 6.0,
            a_brake_max: 10.0,
        }
    }
}

impl SpeedLimits {
    pub fn validate(&self) -> Result<()> {
        if [self.v_cap, self.a_lat_max, self.a_accel_max, self.a_brake_max]
            .iter()
            .all(|v| *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::Config("speed limits must all be positive".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizedRaceline {
    pub lane: Lane,
    /// Final lateral offsets at the centerline samples.
    pub alpha: Vec<f64>,
    /// Objective value after every accepted iteration, starting with the
    /// centerline's.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl OptimizedRaceline {
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }
}

struct Offsets<'a> {
    base: &'a [Vec2],
    normals: &'a [Vec2],
}

impl Offsets<'_> {
    fn n(&self) -> usize {
        self.base.len()
    }

    fn point(&self, alpha: &[f64], i: usize) -> Vec2 {
        self.base[i] + self.normals[i] * alpha[i]
    }

    fn points(&self, alpha: &[f64]) -> Vec<Vec2> {
        (0..self.n()).map(|i| self.point(alpha, i)).collect()
    }

    /// Residual r_i = κ_i·sqrt(ds_i) for the triple centered at i with the
    /// three offsets given explicitly.
    fn residual_local(&self, i: usize, a_prev: f64, a_mid: f64, a_next: f64) -> f64 {
        let n = self.n();
        let ip = (i + n - 1) % n;
        let inx = (i + 1) % n;
        let p0 = self.base[ip] + self.normals[ip] * a_prev;
        let p1 = self.base[i] + self.normals[i] * a_mid;
        let p2 = self.base[inx] + self.normals[inx] * a_next;
        let ds = 0.5 * ((p1 - p0).norm() + (p2 - p1).norm());
        circumscribed_curvature(&p0, &p1, &p2) * ds.sqrt()
    }

    fn residuals(&self, alpha: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| self.residual_local(i, alpha[(i + n - 1) % n], alpha[i], alpha[(i + 1) % n]))
            .collect()
    }

    fn objective(&self, alpha: &[f64]) -> f64 {
        self.residuals(alpha).iter().map(|r| r * r).sum()
    }

    /// Cyclic tridiagonal Jacobian rows: (∂r_i/∂α_{i−1}, ∂r_i/∂α_i, ∂r_i/∂α_{i+1}).
    fn jacobian(&self, alpha: &[f64]) -> Vec<[f64; 3]> {
        const H: f64 = 1e-6;
        let n = self.n();
        (0..n)
            .map(|i| {
                let (a, b, c) = (alpha[(i + n - 1) % n], alpha[i], alpha[(i + 1) % n]);
                let d0 = (self.residual_local(i, a + H, b, c) - self.residual_local(i, a - H, b, c))
                    / (2.0 * H);
                let d1 = (self.residual_local(i, a, b + H, c) - self.residual_local(i, a, b - H, c))
                    / (2.0 * H);
                let d2 = (self.residual_local(i, a, b, c + H) - self.residual_local(i, a, b, c - H))
                    / (2.0 * H);
                [d0, d1, d2]
            })
            .collect()
    }
}

fn project_box(alpha: &mut [f64], bound: &[f64]) {
    for (a, b) in alpha.iter_mut().zip(bound) {
        *a = a.clamp(-*b, *b);
    }
}

/// Computes the minimum-curvature raceline within `problem.alpha_max`.
pub fn optimize_min_curvature(problem: &RacelineProblem) -> Result<OptimizedRaceline> {
    optimize_min_curvature_from(problem, &vec![0.0; problem.track.len()])
}

/// Same as [`optimize_min_curvature`] but starting from the offsets
/// `initial` (projected onto the bounds) instead of the centerline.
pub fn optimize_min_curvature_from(
    problem: &RacelineProblem,
    initial: &[f64],
) -> Result<OptimizedRaceline> {
    problem.validate()?;
    if initial.len() != problem.track.len() {
        return Err(Error::Config("initial offsets must match the track".into()));
    }
    let track = &problem.track;
    let n = track.len();
    let normals = track.normals();
    let model = Offsets {
        base: &track.centerline,
        normals: &normals,
    };
    let bound = &problem.alpha_max;

    let mut alpha = initial.to_vec();
    project_box(&mut alpha, bound);
    let mut f = model.objective(&alpha);
    let mut history = vec![f];
    let mut converged = false;

    for _ in 0..problem.iterations {
        let r = model.residuals(&alpha);
        let jac = model.jacobian(&alpha);
        // Gradient of Σ r² is 2·Jᵀr.
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let cols = [(i + n - 1) % n, i, (i + 1) % n];
            for (k, c) in cols.iter().enumerate() {
                grad[*c] += 2.0 * jac[i][k] * r[i];
            }
        }
        let at_lower = |i: usize| alpha[i] <= -bound[i] + 1e-12;
        let at_upper = |i: usize| alpha[i] >= bound[i] - 1e-12;
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                bound[i] > 0.0 && !(at_lower(i) && grad[i] > 0.0) && !(at_upper(i) && grad[i] < 0.0)
            })
            .collect();
        let pg_norm = free.iter().map(|&i| grad[i] * grad[i]).sum::<f64>().sqrt();
        if free.is_empty() || pg_norm < 1e-14 {
            converged = true;
            break;
        }

        let next = newton_step(&alpha, &jac, &r, &free, bound, f, &model, problem.step_size)
            .or_else(|| gradient_step(&alpha, &grad, &free, bound, f, &model, problem.step_size));
        let Some((new_alpha, new_f)) = next else {
            converged = true;
            break;
        };
        let decrease = f - new_f;
        alpha = new_alpha;
        f = new_f;
        history.push(f);
        if decrease <= 1e-13 * f.max(1e-300) {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "minimum-curvature optimizer stopped after {} iterations without converging",
            problem.iterations
        );
    }

    let pts = model.points(&alpha);
    let (resampled, _) = resample_closed(&pts, &[], track.spacing)?;
    let lane = Lane::from_resampled(LaneId::Optimized, &resampled, SpeedLimits::default().v_cap);
    Ok(OptimizedRaceline {
        lane,
        alpha,
        history,
        converged,
    })
}

#[allow(clippy::too_many_arguments)]
fn newton_step(
    alpha: &[f64],
    jac: &[[f64; 3]],
    r: &[f64],
    free: &[usize],
    bound: &[f64],
    f: f64,
    model: &Offsets<'_>,
    step: f64,
) -> Option<(Vec<f64>, f64)> {
    let n = alpha.len();
    let m = free.len();
    let mut slot = vec![usize::MAX; n];
    for (k, &i) in free.iter().enumerate() {
        slot[i] = k;
    }
    // Reduced normal equations (JᵀJ)_FF d = −(Jᵀr)_F.
    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut g = DVector::<f64>::zeros(m);
    for i in 0..n {
        let cols = [(i + n - 1) % n, i, (i + 1) % n];
        for (a, &ca) in cols.iter().enumerate() {
            let sa = slot[ca];
            if sa == usize::MAX {
                continue;
            }
            g[sa] += jac[i][a] * r[i];
            for (b, &cb) in cols.iter().enumerate() {
                let sb = slot[cb];
                if sb != usize::MAX {
                    h[(sa, sb)] += jac[i][a] * jac[i][b];
                }
            }
        }
    }
    let scale = (0..m).map(|k| h[(k, k)]).fold(0.0, f64::max).max(1e-300);
    for k in 0..m {
        h[(k, k)] += 1e-10 * scale;
    }
    let d = h.cholesky()?.solve(&(-g));
    line_search(alpha, free, |k| d[k], bound, f, model, step)
}

fn gradient_step(
    alpha: &[f64],
    grad: &[f64],
    free: &[usize],
    bound: &[f64],
    f: f64,
    model: &Offsets<'_>,
    step: f64,
) -> Option<(Vec<f64>, f64)> {
    let gmax = free.iter().map(|&i| grad[i].abs()).fold(0.0, f64::max);
    if gmax == 0.0 {
        return None;
    }
    // Scale so the first trial moves at most `step` metres.
    let s = step / gmax;
    line_search(alpha, free, |k| -grad[free[k]] * s, bound, f, model, 1.0)
}

fn line_search(
    alpha: &[f64],
    free: &[usize],
    dir: impl Fn(usize) -> f64,
    bound: &[f64],
    f: f64,
    model: &Offsets<'_>,
    step: f64,
) -> Option<(Vec<f64>, f64)> {
    let mut t = step;
    for _ in 0..40 {
        let mut trial = alpha.to_vec();
        for (k, &i) in free.iter().enumerate() {
            trial[i] += t * dir(k);
        }
        project_box(&mut trial, bound);
        let ft = model.objective(&trial);
        if ft < f {
            return Some((trial, ft));
        }
        t *= 0.5;
    }
    None
}

/// Total squared curvature integrated along a closed polyline, Σ κ²·ds.
pub fn bending_energy(points: &[Vec2]) -> f64 {
    let n = points.len();
    (0..n)
        .map(|i| {
            let a = &points[(i + n - 1) % n];
            let b = &points[i];
            let c = &points[(i + 1) % n];
            let k = circumscribed_curvature(a, b, c);
            k * k * 0.5 * ((b - a).norm() + (c - b).norm())
        })
        .sum()
}

/// Fills the lane's target speeds with the curvature-limited profile shaped
/// by forward (acceleration) and backward (braking) passes around the loop.
pub fn velocity_profile(lane: &Lane, limits: &SpeedLimits) -> Lane {
    let caps: Vec<f64> = lane
        .waypoints
        .iter()
        .map(|wp| {
            let k = wp.curvature.abs();
            if k > 0.0 {
                limits.v_cap.min((limits.a_lat_max / k).sqrt())
            } else {
                limits.v_cap
            }
        })
        .collect();
    let ds = segment_lengths(lane);
    let v = accel_passes(&caps, &ds, limits);
    let mut out = lane.clone();
    for (wp, v) in out.waypoints.iter_mut().zip(v) {
        wp.target_speed = v;
    }
    out
}

/// `ds[i]` is the distance from waypoint i to waypoint i+1 (cyclic).
pub fn segment_lengths(lane: &Lane) -> Vec<f64> {
    let n = lane.len();
    (0..n)
        .map(|i| (lane.waypoints[(i + 1) % n].pos() - lane.waypoints[i].pos()).norm())
        .collect()
}

/// Cyclic forward/backward passes that only ever lower speeds, repeated
/// until nothing changes.
pub fn accel_passes(speeds: &[f64], ds: &[f64], limits: &SpeedLimits) -> Vec<f64> {
    let n = speeds.len();
    let mut v = speeds.to_vec();
    // Each sweep can only lower values and there are finitely many binding
    // patterns; in practice two or three sweeps settle.
    for _ in 0..(4 * n + 8) {
        let mut changed = false;
        for k in 0..n {
            let i = k;
            let j = (k + 1) % n;
            let lim = (v[i] * v[i] + 2.0 * limits.a_accel_max * ds[i]).sqrt();
            if v[j] > lim {
                v[j] = lim;
                changed = true;
            }
        }
        for k in (0..n).rev() {
            let i = k;
            let j = (k + 1) % n;
            let lim = (v[j] * v[j] + 2.0 * limits.a_brake_max * ds[i]).sqrt();
            if v[i] > lim {
                v[i] = lim;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{generate_oval, lane_offset};

    #[test]
    fn zero_bound_returns_centerline() {
        let track = generate_oval(300.0, 100.0, 15.0, 2.0).unwrap();
        let center = lane_offset(&track, 0.0, 2.0).unwrap();
        let prob = RacelineProblem::new(track, 0.95).with_uniform_alpha_max(0.0);
        let out = optimize_min_curvature(&prob).unwrap();
        assert!(out.alpha.iter().all(|a| *a == 0.0));
        assert_eq!(out.lane.len(), center.len());
        for (a, b) in out.lane.waypoints.iter().zip(&center.waypoints) {
            assert!((a.pos() - b.pos()).norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_bound_wider_than_track() {
        let track = generate_oval(300.0, 100.0, 15.0, 2.0).unwrap();
        let prob = RacelineProblem::new(track, 0.95).with_uniform_alpha_max(7.0);
        assert!(matches!(optimize_min_curvature(&prob), Err(Error::Config(_))));
    }

    #[test]
    fn objective_never_increases() {
        let track = generate_oval(100.0, 60.0, 12.0, 2.0).unwrap();
        let mut prob = RacelineProblem::new(track, 0.95);
        prob.iterations = 30;
        let out = optimize_min_curvature(&prob).unwrap();
        for w in out.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(out.history.last().unwrap() < &out.history[0]);
    }

    #[test]
    fn single_iteration_flags_non_convergence() {
        let track = generate_oval(100.0, 60.0, 12.0, 2.0).unwrap();
        let mut prob = RacelineProblem::new(track, 0.95);
        prob.iterations = 1;
        let out = optimize_min_curvature(&prob).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations(), 1);
    }

    #[test]
    fn straight_lane_runs_at_cap() {
        let pts: Vec<Vec2> = (0..200)
            .map(|i| Vec2::new(i as f64 * 2.0, 0.0))
            .collect();
        let mut lane = Lane::from_resampled(LaneId::Center, &pts, 1.0);
        // Open straight: zero curvature everywhere including the ends.
        for wp in &mut lane.waypoints {
            wp.curvature = 0.0;
        }
        let out = velocity_profile(&lane, &SpeedLimits::default());
        assert!(out.waypoints.iter().all(|wp| wp.target_speed == 50.0));
    }

    #[test]
    fn circle_speed_closed_form() {
        let track = generate_oval(0.0, 100.0, 15.0, 2.0).unwrap();
        let lane = lane_offset(&track, 0.0, 2.0).unwrap();
        let limits = SpeedLimits {
            a_lat_max: 12.0,
            v_cap: 50.0,
            ..SpeedLimits::default()
        };
        let out = velocity_profile(&lane, &limits);
        for wp in &out.waypoints {
            assert!((wp.target_speed - 1200f64.sqrt()).abs() < 0.05);
        }
    }
}
