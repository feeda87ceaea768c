//! Receding-horizon tracking on a kinematic bicycle model.
//!
//! The model state is `z = [x, y, yaw, v]`, the input `u = [accel, delta]`.
//! Each solve samples the published segment at the distance the reference
//! speeds cover per step, linearizes the RK4-discretized model about that
//! reference, and solves the resulting unconstrained quadratic tracking
//! problem with a backward Riccati recursion. Only the first input is
//! applied, after clamping to the actuator limits.
//!
//! Inputs are penalized as deviations from the reference feedforward
//! (`delta_ref = atan(L·kappa)`, `accel_ref = dv_ref/dt`), so a car on a
//! constant-radius reference holds zero error at steady state.

use nalgebra::{Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};
use crate::track::Waypoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    /// Steering angle currently applied at the front wheels.
    pub delta: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, yaw: f64, v: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
            v,
            delta: 0.0,
        }
    }

    pub fn z(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.yaw, self.v)
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.yaw, self.v, self.delta]
            .iter()
            .all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub accel: f64,
    pub delta_cmd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub wheelbase: f64,
    pub delta_max: f64,
    pub delta_rate_max: f64,
    pub a_cmd_max: f64,
    /// Commanded steering is also capped so that `v²·tan(delta)/L` stays
    /// below this lateral acceleration.
    pub a_lat_cmd_max: f64,
    pub v_max: f64,
    pub w_pos: f64,
    pub w_yaw: f64,
    pub w_v: f64,
    pub w_accel: f64,
    pub w_delta: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            dt: 0.06,
            wheelbase: 3.0,
            delta_max: 0.35,
            delta_rate_max: 0.8,
            a_cmd_max: 10.0,
            a_lat_cmd_max: 25.0,
            v_max: 60.0,
            w_pos: 0.75,
            w_yaw: 0.75,
            w_v: 1.0,
            w_accel: 0.1,
            w_delta: 20.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_pos, self.w_yaw, self.w_v, self.w_accel, self.w_delta];
        if self.horizon < 2 || !(self.dt > 0.0) || !(self.wheelbase > 0.0) {
            return Err(Error::Config("mpc needs horizon ≥ 2, dt > 0, wheelbase > 0".into()));
        }
        if !(self.delta_max > 0.0 && self.delta_max < std::f64::consts::FRAC_PI_2)
            || !(self.delta_rate_max > 0.0)
            || !(self.a_cmd_max > 0.0)
            || !(self.a_lat_cmd_max > 0.0)
            || !(self.v_max > 0.0)
        {
            return Err(Error::Config("mpc actuator limits out of range".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || !(self.w_pos + self.w_yaw + self.w_v > 0.0) {
            return Err(Error::Config("mpc weights must be non-negative with a state weight".into()));
        }
        Ok(())
    }

    pub fn q(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::new(self.w_pos, self.w_pos, self.w_yaw, self.w_v))
    }

    pub fn r(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal(&Vector2::new(self.w_accel, self.w_delta))
    }

    /// Actuator limits only.
    pub fn clamp(&self, cmd: ControlCommand) -> ControlCommand {
        ControlCommand {
            accel: cmd.accel.clamp(-self.a_cmd_max, self.a_cmd_max),
            delta_cmd: cmd.delta_cmd.clamp(-self.delta_max, self.delta_max),
        }
    }

    /// Steering bound at speed `v`: the actuator limit, tightened by the
    /// lateral acceleration cap.
    pub fn steering_limit(&self, v: f64) -> f64 {
        let lat = (self.wheelbase * self.a_lat_cmd_max / (v * v).max(1e-9)).atan();
        self.delta_max.min(lat)
    }

    /// Actuator limits plus the speed-dependent steering bound.
    pub fn clamp_at(&self, cmd: ControlCommand, v: f64) -> ControlCommand {
        let dm = self.steering_limit(v);
        let cmd = self.clamp(cmd);
        ControlCommand {
            accel: cmd.accel,
            delta_cmd: cmd.delta_cmd.clamp(-dm, dm),
        }
    }
}

fn f(z: &Vector4<f64>, u: &Vector2<f64>, wheelbase: f64) -> Vector4<f64> {
    let (s, c) = z[2].sin_cos();
    Vector4::new(z[3] * c, z[3] * s, z[3] * u[1].tan() / wheelbase, u[0])
}

fn f_z(z: &Vector4<f64>, u: &Vector2<f64>, wheelbase: f64) -> Matrix4<f64> {
    let (s, c) = z[2].sin_cos();
    let v = z[3];
    Matrix4::new(
        0.0, 0.0, -v * s, c, //
        0.0, 0.0, v * c, s, //
        0.0, 0.0, 0.0, u[1].tan() / wheelbase, //
        0.0, 0.0, 0.0, 0.0,
    )
}

fn f_u(z: &Vector4<f64>, u: &Vector2<f64>, wheelbase: f64) -> Matrix4x2<f64> {
    let cd = u[1].cos();
    Matrix4x2::new(
        0.0, 0.0, //
        0.0, 0.0, //
        0.0, z[3] / (wheelbase * cd * cd), //
        1.0, 0.0,
    )
}

/// One RK4 step of the bicycle model with the input held constant. No
/// wrapping or clamping, so it is smooth everywhere with `|delta| < π/2`.
pub fn model_step(z: &Vector4<f64>, u: &Vector2<f64>, dt: f64, wheelbase: f64) -> Vector4<f64> {
    let k1 = f(z, u, wheelbase);
    let k2 = f(&(z + k1 * (0.5 * dt)), u, wheelbase);
    let k3 = f(&(z + k2 * (0.5 * dt)), u, wheelbase);
    let k4 = f(&(z + k3 * dt), u, wheelbase);
    z + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0)
}

/// Jacobians of [`model_step`] with respect to `z` and `u`, propagated
/// exactly through the RK4 stages.
pub fn linearize(
    z: &Vector4<f64>,
    u: &Vector2<f64>,
    dt: f64,
    wheelbase: f64,
) -> Result<(Matrix4<f64>, Matrix4x2<f64>)> {
    if !(u[1].abs() < std::f64::consts::FRAC_PI_2) {
        return Err(Error::SingularSteering(u[1]));
    }
    let h = dt;
    let i4 = Matrix4::<f64>::identity();

    let z1 = *z;
    let k1 = f(&z1, u, wheelbase);
    let a1 = f_z(&z1, u, wheelbase);
    let b1 = f_u(&z1, u, wheelbase);

    let z2 = z + k1 * (0.5 * h);
    let k2 = f(&z2, u, wheelbase);
    let fz2 = f_z(&z2, u, wheelbase);
    let a2 = fz2 * (i4 + a1 * (0.5 * h));
    let b2 = fz2 * (b1 * (0.5 * h)) + f_u(&z2, u, wheelbase);

    let z3 = z + k2 * (0.5 * h);
    let fz3 = f_z(&z3, u, wheelbase);
    let a3 = fz3 * (i4 + a2 * (0.5 * h));
    let b3 = fz3 * (b2 * (0.5 * h)) + f_u(&z3, u, wheelbase);

    let k3 = f(&z3, u, wheelbase);
    let z4 = z + k3 * h;
    let fz4 = f_z(&z4, u, wheelbase);
    let a4 = fz4 * (i4 + a3 * h);
    let b4 = fz4 * (b3 * h) + f_u(&z4, u, wheelbase);

    let a = i4 + (a1 + 2.0 * a2 + 2.0 * a3 + a4) * (h / 6.0);
    let b = (b1 + 2.0 * b2 + 2.0 * b3 + b4) * (h / 6.0);
    Ok((a, b))
}

/// Advances the vehicle by `dt`: steering slews toward the command at the
/// rate limit, then one RK4 step with the slewed angle held.
pub fn dynamics(state: &VehicleState, cmd: &ControlCommand, cfg: &MpcConfig, dt: f64) -> VehicleState {
    let cmd = cfg.clamp(*cmd);
    let max_step = cfg.delta_rate_max * dt;
    let delta = (state.delta + (cmd.delta_cmd - state.delta).clamp(-max_step, max_step))
        .clamp(-cfg.delta_max, cfg.delta_max);
    let z = model_step(&state.z(), &Vector2::new(cmd.accel, delta), dt, cfg.wheelbase);
    VehicleState {
        x: z[0],
        y: z[1],
        yaw: wrap_angle(z[2]),
        v: z[3].clamp(0.0, cfg.v_max),
        delta,
    }
}

/// Affine time-varying tracking problem in error coordinates:
/// `e[k+1] = a[k]·e[k] + b[k]·du[k] + c[k]`, cost
/// `Σ_{k=1..N} e[k]ᵀ·q·e[k] + Σ_{k=0..N−1} du[k]ᵀ·r·du[k]`.
#[derive(Debug, Clone)]
pub struct TrackingQp {
    pub a: Vec<Matrix4<f64>>,
    pub b: Vec<Matrix4x2<f64>>,
    pub c: Vec<Vector4<f64>>,
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
    pub e0: Vector4<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub du: Vec<Vector2<f64>>,
    /// Error trajectory `e[0..=N]`.
    pub e: Vec<Vector4<f64>>,
    pub cost: f64,
}

fn solve2(h: &Matrix2<f64>) -> Matrix2<f64> {
    h.try_inverse()
        .or_else(|| (h + Matrix2::identity() * 1e-12).try_inverse())
        .unwrap_or_else(Matrix2::zeros)
}

/// Exact minimizer of a [`TrackingQp`] by backward Riccati recursion and a
/// forward rollout.
pub fn riccati_solve(qp: &TrackingQp) -> QpSolution {
    let n = qp.a.len();
    let mut gains = vec![(Matrix4x2::<f64>::zeros().transpose(), Vector2::zeros()); n];
    let mut p = qp.q;
    let mut pv = Vector4::zeros();
    for k in (0..n).rev() {
        let (a, b, c) = (&qp.a[k], &qp.b[k], &qp.c[k]);
        let w = p * c + pv;
        let hm = qp.r + b.transpose() * p * b;
        let g = b.transpose() * p * a;
        let h = b.transpose() * w;
        let hinv = solve2(&hm);
        let kfb = hinv * g;
        let kff = hinv * h;
        gains[k] = (kfb, kff);
        let qk = if k == 0 { Matrix4::zeros() } else { qp.q };
        let pn = qk + a.transpose() * p * a - g.transpose() * kfb;
        pv = a.transpose() * w - g.transpose() * kff;
        p = 0.5 * (pn + pn.transpose());
    }

    let mut e = Vec::with_capacity(n + 1);
    let mut du = Vec::with_capacity(n);
    let mut cost = 0.0;
    let mut ek = qp.e0;
    e.push(ek);
    for k in 0..n {
        let (kfb, kff) = &gains[k];
        let uk = -(kfb * ek) - kff;
        cost += (uk.transpose() * qp.r * uk)[0];
        ek = qp.a[k] * ek + qp.b[k] * uk + qp.c[k];
        cost += (ek.transpose() * qp.q * ek)[0];
        du.push(uk);
        e.push(ek);
    }
    QpSolution { du, e, cost }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub command: ControlCommand,
    /// Predicted model states `z[0..=N]`.
    pub predicted: Vec<Vector4<f64>>,
    pub cost: f64,
    /// The reference was unusable and the previous command was held.
    pub degenerate: bool,
}

/// Reference sample at arc `s` of the segment.
#[derive(Debug, Clone, Copy)]
struct RefPoint {
    pos: Vec2,
    yaw: f64,
    v: f64,
    kappa: f64,
}

struct RefPath {
    pts: Vec<Vec2>,
    arc: Vec<f64>,
    yaw: Vec<f64>,
    v: Vec<f64>,
    kappa: Vec<f64>,
}

impl RefPath {
    /// Drops repeated points; `None` when fewer than two distinct remain.
    fn new(segment: &[Waypoint]) -> Option<Self> {
        let mut kept: Vec<&Waypoint> = Vec::with_capacity(segment.len());
        for w in segment {
            if kept.last().is_none_or(|p| (w.pos() - p.pos()).norm() > 1e-9) {
                kept.push(w);
            }
        }
        let n = kept.len();
        if n < 2 {
            return None;
        }
        let pts: Vec<Vec2> = kept.iter().map(|w| w.pos()).collect();
        let mut arc = vec![0.0; n];
        for i in 1..n {
            arc[i] = arc[i - 1] + (pts[i] - pts[i - 1]).norm();
        }
        // Tangent headings from positions only, so the stored heading field
        // (and its 2π representation) never influences the solve.
        let yaw = (0..n)
            .map(|i| {
                let d = pts[(i + 1).min(n - 1)] - pts[i.saturating_sub(1)];
                d.y.atan2(d.x)
            })
            .collect();
        Some(Self {
            pts,
            arc,
            yaw,
            v: kept.iter().map(|w| w.target_speed).collect(),
            kappa: kept.iter().map(|w| w.curvature).collect(),
        })
    }

    fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    /// Arc of the closest point, with the end chords extended so a car
    /// slightly behind the first waypoint gets a negative arc.
    fn project(&self, p: &Vec2) -> f64 {
        let n = self.pts.len();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..n - 1 {
            let a = self.pts[i];
            let d = self.pts[i + 1] - a;
            let len = self.arc[i + 1] - self.arc[i];
            let mut t = (p - a).dot(&d) / (len * len);
            if i > 0 {
                t = t.max(0.0);
            }
            if i < n - 2 {
                t = t.min(1.0);
            }
            let dist = (a + d * t - p).norm_squared();
            if dist < best.0 {
                best = (dist, self.arc[i] + t * len);
            }
        }
        best.1
    }

    fn sample(&self, s: f64) -> RefPoint {
        let n = self.pts.len();
        let i = match self.arc.partition_point(|a| *a <= s) {
            0 => 0,
            k => (k - 1).min(n - 2),
        };
        let len = self.arc[i + 1] - self.arc[i];
        let t = (s - self.arc[i]) / len;
        let tc = t.clamp(0.0, 1.0);
        let lerp = |v: &[f64]| v[i] + (v[i + 1] - v[i]) * tc;
        RefPoint {
            pos: self.pts[i] + (self.pts[i + 1] - self.pts[i]) * t,
            yaw: self.yaw[i] + wrap_angle(self.yaw[i + 1] - self.yaw[i]) * tc,
            v: lerp(&self.v).max(0.0),
            kappa: lerp(&self.kappa),
        }
    }
}

fn error_of(z: &Vector4<f64>, zref: &Vector4<f64>) -> Vector4<f64> {
    let mut e = z - zref;
    e[2] = wrap_angle(e[2]);
    e
}

/// One receding-horizon solve. `prev` is held when the reference is
/// degenerate (fewer than two distinct points).
pub fn solve(
    state: &VehicleState,
    segment: &[Waypoint],
    cfg: &MpcConfig,
    prev: ControlCommand,
) -> Result<MpcSolution> {
    let n = cfg.horizon;
    let z0 = state.z();
    let Some(path) = RefPath::new(segment) else {
        return Ok(MpcSolution {
            command: prev,
            predicted: vec![z0],
            cost: 0.0,
            degenerate: true,
        });
    };
    debug_assert!(path.length() > 0.0);

    // The reference speed starts at the car's speed and converges to the
    // profile within the acceleration limit; positions follow that travel,
    // so a car far off the profile speed still gets yaw references that
    // match where it will actually be on a curve.
    let mut s = path.project(&state.position());
    let mut v = state.v;
    let dv_max = cfg.a_cmd_max * cfg.dt;
    let mut zref = Vec::with_capacity(n + 1);
    let mut kappa = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        let r = path.sample(s);
        zref.push(Vector4::new(r.pos.x, r.pos.y, r.yaw, v));
        kappa.push(r.kappa);
        s += v * cfg.dt;
        v += (r.v - v).clamp(-dv_max, dv_max);
    }
    let uref: Vec<Vector2<f64>> = (0..n)
        .map(|k| {
            let accel = ((zref[k + 1][3] - zref[k][3]) / cfg.dt).clamp(-cfg.a_cmd_max, cfg.a_cmd_max);
            let delta = (cfg.wheelbase * kappa[k]).atan().clamp(-cfg.delta_max, cfg.delta_max);
            Vector2::new(accel, delta)
        })
        .collect();

    let mut qp = TrackingQp {
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        q: cfg.q(),
        r: cfg.r(),
        e0: error_of(&z0, &zref[0]),
    };
    for k in 0..n {
        let (a, b) = linearize(&zref[k], &uref[k], cfg.dt, cfg.wheelbase)?;
        let next = model_step(&zref[k], &uref[k], cfg.dt, cfg.wheelbase);
        qp.a.push(a);
        qp.b.push(b);
        qp.c.push(error_of(&next, &zref[k + 1]));
    }
    let sol = riccati_solve(&qp);

    let u0 = uref[0] + sol.du[0];
    let command = cfg.clamp_at(
        ControlCommand {
            accel: u0[0],
            delta_cmd: u0[1],
        },
        state.v,
    );
    let predicted = sol
        .e
        .iter()
        .zip(&zref)
        .map(|(e, r)| {
            let mut z = r + e;
            z[2] = wrap_angle(z[2]);
            z
        })
        .collect();
    Ok(MpcSolution {
        command,
        predicted,
        cost: sol.cost,
        degenerate: false,
    })
}
