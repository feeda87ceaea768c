//! The race world. A fixed-step loop integrates the ego and the opponents,
//! runs LiDAR, perception and the planner every LiDAR period and the MPC
//! every control period, detects contacts and scores the lap.

use std::path::Path;
use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ArcProjection, ClosedPolyline, OrientedBox, Pose, Segment, Vec2};
use crate::lidar::scan;
use crate::mpc::{self, dynamics, ControlCommand, MpcConfig, VehicleState};
use crate::perception::{classify, crop, make_sparse, LaneOccupancy, SparseLaneSet};
use crate::planner::{
    brake_reference, decide_with, effective_lane, publish_trajectory, Mode, PlannerState,
};
use crate::raceline::{optimize_min_curvature, velocity_profile, RacelineProblem};
use crate::scenario::{LaneChange, NpcControl, Scenario};
use crate::trace::{Agent, TraceRow};
use crate::track::{project, Lane, LaneId, TrackModel, Waypoint};

pub const CAR_LENGTH: f64 = 5.0;
pub const CAR_WIDTH: f64 = 1.9;
pub const COLLISION_PENALTY: f64 = 5.0;

/// Everything derived from the track and limits alone; shared by every
/// race on the same track.
#[derive(Debug, Clone)]
pub struct RaceSetup {
    pub track: TrackModel,
    pub centerline: ClosedPolyline,
    /// Inner, center, outer and optimized, with speed profiles.
    pub lanes: [Lane; 4],
    pub lane_polys: [ClosedPolyline; 4],
    pub sparse: SparseLaneSet,
    pub walls: Vec<Segment>,
    pub raceline_converged: bool,
}

impl RaceSetup {
    pub fn build(scenario: &Scenario, base: Option<&Path>) -> Result<Self> {
        scenario.validate()?;
        Self::from_track(scenario.track.build(base)?, scenario)
    }

    pub fn from_track(track: TrackModel, scenario: &Scenario) -> Result<Self> {
        let limits = &scenario.speed_limits;
        let [inner, center, outer] = track.base_lanes(limits.v_cap)?;
        let mut problem = RacelineProblem::new(track.clone(), scenario.raceline.car_half_width);
        problem.iterations = scenario.raceline.iterations;
        let opt = optimize_min_curvature(&problem)?;
        if !opt.converged {
            warn!("raceline optimizer stopped before converging");
        }
        let lanes = [
            velocity_profile(&inner, limits),
            velocity_profile(&center, limits),
            velocity_profile(&outer, limits),
            velocity_profile(&opt.lane, limits),
        ];
        let base = [lanes[0].clone(), lanes[1].clone(), lanes[2].clone()];
        let sparse = make_sparse(&base, scenario.planner.sparse_stride)?;
        Ok(Self {
            centerline: track.polyline(),
            lane_polys: lanes.clone().map(|l| l.polyline()),
            walls: track.walls(),
            lanes,
            sparse,
            track,
            raceline_converged: opt.converged,
        })
    }

    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.index()]
    }

    pub fn base_lanes(&self) -> [Lane; 3] {
        [self.lanes[0].clone(), self.lanes[1].clone(), self.lanes[2].clone()]
    }

    /// Pose on lane `id` abreast of centerline arc `arc`, heading along it.
    pub fn start_pose(&self, id: LaneId, arc: f64) -> Pose {
        let poly = &self.lane_polys[id.index()];
        let p = poly.project(&self.centerline.point_at(arc));
        let a = poly.point_at(p.arc);
        let b = poly.point_at(p.arc + 0.5);
        let d = b - a;
        Pose::new(a.x, a.y, d.y.atan2(d.x))
    }
}

/// Centerline arc progress, unwrapped across the start line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressTracker {
    hint: usize,
    arc: f64,
    pub progress: f64,
}

impl ProgressTracker {
    pub fn new(centerline: &ClosedPolyline, p: &Vec2, progress: f64) -> Self {
        let pr = centerline.project(p);
        Self {
            hint: pr.segment,
            arc: pr.arc,
            progress,
        }
    }

    pub fn update(&mut self, centerline: &ClosedPolyline, p: &Vec2) -> ArcProjection {
        let pr = centerline.project_near(p, self.hint, 8);
        let per = centerline.perimeter();
        let mut d = pr.arc - self.arc;
        if d > 0.5 * per {
            d -= per;
        } else if d < -0.5 * per {
            d += per;
        }
        self.progress += d;
        self.arc = pr.arc;
        self.hint = pr.segment;
        pr
    }
}

pub fn car_box(s: &VehicleState) -> OrientedBox {
    OrientedBox::new(s.position(), s.yaw, CAR_LENGTH, CAR_WIDTH)
}

/// Pure-pursuit steering toward the lane point one lookahead ahead, with
/// proportional speed control.
pub fn pure_pursuit(
    s: &VehicleState,
    lane: &ClosedPolyline,
    target_speed: f64,
    ctrl: &NpcControl,
    vehicle: &MpcConfig,
) -> ControlCommand {
    let ld = ctrl.lookahead_min.max(ctrl.lookahead_time * s.v);
    let pr = lane.project(&s.position());
    let target = lane.point_at(pr.arc + ld);
    let local = Pose::new(s.x, s.y, s.yaw).to_local(&target);
    let alpha = local.y.atan2(local.x);
    let dist = local.norm().max(1e-6);
    vehicle.clamp(ControlCommand {
        accel: ctrl.speed_gain * (target_speed - s.v),
        delta_cmd: (2.0 * vehicle.wheelbase * alpha.sin() / dist).atan(),
    })
}

/// Advances an opponent by one physics step.
pub fn step_npc(
    s: &VehicleState,
    lane: &ClosedPolyline,
    target_speed: f64,
    ctrl: &NpcControl,
    vehicle: &MpcConfig,
    dt: f64,
) -> (VehicleState, ControlCommand) {
    let cmd = pure_pursuit(s, lane, target_speed, ctrl, vehicle);
    (dynamics(s, &cmd, vehicle, dt), cmd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub time: f64,
    pub npc: usize,
    pub penalty: f64,
}

/// Edge-triggered contact detection between the ego and each opponent.
#[derive(Debug, Clone, Default)]
pub struct CollisionMonitor {
    touching: Vec<bool>,
}

impl CollisionMonitor {
    pub fn new(npcs: usize) -> Self {
        Self {
            touching: vec![false; npcs],
        }
    }

    /// Events for contacts that started at this check.
    pub fn check(&mut self, t: f64, ego: &OrientedBox, npcs: &[OrientedBox]) -> Vec<CollisionEvent> {
        let mut out = Vec::new();
        for (i, b) in npcs.iter().enumerate() {
            let now = ego.overlaps(b);
            if now && !self.touching[i] {
                out.push(CollisionEvent {
                    time: t,
                    npc: i,
                    penalty: COLLISION_PENALTY,
                });
            }
            self.touching[i] = now;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceResult {
    pub raw_lap_time: f64,
    pub collisions: Vec<CollisionEvent>,
    pub total_time: f64,
    pub overtakes_completed: usize,
    pub peak_speed: f64,
    pub mean_speed: f64,
    pub finished: bool,
    /// Sim time at which the ego left the track, if it did.
    pub off_track_at: Option<f64>,
}

impl RaceResult {
    pub fn is_clean(&self) -> bool {
        self.finished && self.collisions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub calls: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, Default)]
struct Stopwatch {
    total: f64,
    max: f64,
    calls: usize,
}

impl Stopwatch {
    fn record(&mut self, since: Instant) {
        let ms = since.elapsed().as_secs_f64() * 1e3;
        self.total += ms;
        self.max = self.max.max(ms);
        self.calls += 1;
    }

    fn stats(&self) -> StageTiming {
        StageTiming {
            calls: self.calls,
            mean_ms: if self.calls > 0 { self.total / self.calls as f64 } else { 0.0 },
            max_ms: self.max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingStats {
    pub lidar: StageTiming,
    pub perception: StageTiming,
    pub mpc: StageTiming,
}

#[derive(Debug, Clone)]
pub struct RaceOutcome {
    pub result: RaceResult,
    pub trace: Vec<TraceRow>,
    pub timing: TimingStats,
    /// Set when the run was aborted on a non-finite state.
    pub diverged: Option<String>,
}

struct Npc {
    state: VehicleState,
    lane: LaneId,
    target_speed: f64,
    changes: Vec<LaneChange>,
    cmd: ControlCommand,
    progress: ProgressTracker,
}

impl Npc {
    fn lane_at(&mut self, t: f64) -> LaneId {
        while let Some(c) = self.changes.first() {
            if c.time > t {
                break;
            }
            self.lane = c.lane;
            self.changes.remove(0);
        }
        self.lane
    }
}

/// What the controller currently tracks: a lane and whether braking.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Reference {
    lane: LaneId,
    brake: bool,
}

fn segment_for(setup: &RaceSetup, sc: &Scenario, r: Reference, ego: &Vec2) -> Vec<Waypoint> {
    let seg = publish_trajectory(setup.lane(r.lane), ego, sc.planner.horizon_length);
    if r.brake {
        brake_reference(&seg, sc.planner.brake_factor, sc.planner.v_min_follow)
    } else {
        seg
    }
}

fn start_state(pose: Pose, v: f64) -> VehicleState {
    VehicleState::new(pose.x, pose.y, pose.yaw, v)
}

/// Runs one lap. Configuration errors are returned as `Err`; a numerical
/// blow-up ends the run early with `diverged` set and the trace so far.
pub fn run_race(setup: &RaceSetup, sc: &Scenario) -> Result<RaceOutcome> {
    sc.validate()?;
    let (ctrl_div, lidar_div) = sc.rates.divisors()?;
    let dt = 1.0 / sc.rates.physics;
    let perimeter = setup.centerline.perimeter();
    let leads = sc.npc_leads(perimeter)?;
    let lidar_cfg = crate::lidar::LidarConfig {
        seed: sc.seed,
        ..sc.lidar
    };
    let base_lanes = setup.base_lanes();
    let off_track_limit = 2.0 * 2.0 * setup.track.min_half_width();

    let ego_pose = setup.start_pose(sc.ego.lane, sc.ego.start_arc);
    let v0 = sc.ego.start_speed.unwrap_or_else(|| {
        let lane = setup.lane(sc.ego.lane);
        lane.waypoints[project(lane, &ego_pose.position()).index].target_speed
    });
    let mut ego = start_state(ego_pose, v0);
    let mut ego_progress = ProgressTracker::new(&setup.centerline, &ego.position(), 0.0);
    let mut planner = match sc.ego.lane {
        LaneId::Optimized => PlannerState {
            mode: Mode::Optimized,
            ..PlannerState::new(effective_lane(&ego.position(), &base_lanes))
        },
        lane => PlannerState::new(lane),
    };

    let mut npcs: Vec<Npc> = sc
        .npcs
        .iter()
        .zip(&leads)
        .map(|(spec, lead)| {
            let pose = setup.start_pose(spec.lane, spec.start_arc);
            let state = start_state(pose, spec.target_speed);
            let mut changes = spec.lane_changes.clone();
            changes.sort_by(|a, b| a.time.total_cmp(&b.time));
            Npc {
                progress: ProgressTracker::new(&setup.centerline, &state.position(), *lead),
                state,
                lane: spec.lane,
                target_speed: spec.target_speed,
                changes,
                cmd: ControlCommand::default(),
            }
        })
        .collect();

    let mut occupancy = LaneOccupancy::default();
    let mut applied = Reference {
        lane: planner.active_lane(),
        brake: false,
    };
    let mut pending: Option<(Reference, u64)> = None;
    let mut cmd = ControlCommand::default();
    let mut cost = 0.0;
    let mut monitor = CollisionMonitor::new(npcs.len());
    let mut collisions = Vec::new();
    let mut trace = Vec::new();
    let (mut sw_lidar, mut sw_perc, mut sw_mpc) =
        (Stopwatch::default(), Stopwatch::default(), Stopwatch::default());
    let mut peak_speed = ego.v;
    let mut speed_sum = 0.0;
    let mut samples = 0usize;
    let mut finish: Option<f64> = None;
    let mut off_track_at = None;
    let mut diverged = None;

    let max_ticks = (sc.max_time * sc.rates.physics).ceil() as u64;
    let mut k: u64 = 0;
    loop {
        let t = k as f64 * dt;
        let mut decision = None;
        let mut counts = None;

        if k > 0 && k % lidar_div == 0 {
            let boxes: Vec<OrientedBox> = npcs.iter().map(|n| car_box(&n.state)).collect();
            let pose = Pose::new(ego.x, ego.y, ego.yaw);
            let t0 = Instant::now();
            let cloud = scan(&pose, &boxes, &setup.walls, &lidar_cfg, t);
            sw_lidar.record(t0);
            let t0 = Instant::now();
            let cls = classify(
                &crop(&cloud, &sc.perception),
                &pose,
                &setup.sparse,
                sc.perception.lane_reject_halfwidth,
            );
            sw_perc.record(t0);
            occupancy = occupancy.update(cls.counts, t)?;
            if planner.mode == Mode::Optimized {
                planner.current_lane = effective_lane(&ego.position(), &base_lanes);
            }
            let (next, d) = decide_with(&planner, &occupancy, &sc.thresholds, t, &sc.planner);
            if d != planner.last_decision || d != crate::planner::Decision::Stay {
                debug!("t={t:.2} l={:?} {d}", cls.counts);
            }
            planner = next;
            decision = Some(d);
            counts = Some(cls.counts);
            let fresh = Reference {
                lane: planner.active_lane(),
                brake: d.is_brake(),
            };
            if sc.inject_latency {
                pending = Some((fresh, k));
            } else {
                applied = fresh;
            }
        }

        if k % ctrl_div == 0 {
            if let Some((r, since)) = pending {
                if k > since {
                    applied = r;
                    pending = None;
                }
            }
            let seg = segment_for(setup, sc, applied, &ego.position());
            let t0 = Instant::now();
            let sol = mpc::solve(&ego, &seg, &sc.mpc, cmd)?;
            sw_mpc.record(t0);
            cmd = sol.command;
            cost = sol.cost;
        }

        let t_now = t;
        let ego_row = |ego: &VehicleState| TraceRow {
            t: t_now,
            agent: Agent::Ego,
            x: ego.x,
            y: ego.y,
            yaw: ego.yaw,
            v: ego.v,
            lane: applied.lane,
            decision,
            counts,
            accel: cmd.accel,
            delta_cmd: cmd.delta_cmd,
            cost: Some(cost),
        };
        trace.push(ego_row(&ego));
        for (i, n) in npcs.iter_mut().enumerate() {
            let lane = n.lane_at(t);
            let poly = &setup.lane_polys[lane.index()];
            n.cmd = pure_pursuit(&n.state, poly, n.target_speed, &sc.npc_control, &sc.mpc);
            trace.push(TraceRow {
                t,
                agent: Agent::Npc(i),
                x: n.state.x,
                y: n.state.y,
                yaw: n.state.yaw,
                v: n.state.v,
                lane,
                decision: None,
                counts: None,
                accel: n.cmd.accel,
                delta_cmd: n.cmd.delta_cmd,
                cost: None,
            });
        }
        speed_sum += ego.v;
        samples += 1;

        if finish.is_some() || off_track_at.is_some() || k >= max_ticks {
            break;
        }

        // Physics step to t + dt.
        ego = dynamics(&ego, &cmd, &sc.mpc, dt);
        for n in &mut npcs {
            n.state = dynamics(&n.state, &n.cmd, &sc.mpc, dt);
        }
        k += 1;
        let t_next = k as f64 * dt;

        if !ego.is_finite() || npcs.iter().any(|n| !n.state.is_finite()) {
            let msg = Error::Diverged {
                time: t_next,
                what: "non-finite vehicle state".into(),
            }
            .to_string();
            warn!("{msg}");
            diverged = Some(msg);
            break;
        }

        let before = ego_progress.progress;
        let pr = ego_progress.update(&setup.centerline, &ego.position());
        for n in &mut npcs {
            n.progress.update(&setup.centerline, &n.state.position());
        }
        if pr.distance >= off_track_limit {
            warn!("ego off track at t={t_next:.2}");
            off_track_at = Some(t_next);
        }
        let ego_box = car_box(&ego);
        let boxes: Vec<OrientedBox> = npcs.iter().map(|n| car_box(&n.state)).collect();
        for ev in monitor.check(t_next, &ego_box, &boxes) {
            debug!("contact with npc{} at t={:.2}", ev.npc, ev.time);
            collisions.push(ev);
        }
        peak_speed = peak_speed.max(ego.v);

        let after = ego_progress.progress;
        if after >= perimeter && finish.is_none() {
            let frac = if after > before { (perimeter - before) / (after - before) } else { 1.0 };
            finish = Some(t + dt * frac.clamp(0.0, 1.0));
        }
    }

    let finished = finish.is_some() && diverged.is_none();
    let raw_lap_time = finish.unwrap_or(k as f64 * dt);
    let overtakes = if finished {
        npcs.iter()
            .filter(|n| n.progress.progress < ego_progress.progress)
            .count()
    } else {
        0
    };
    let penalty: f64 = collisions.iter().map(|c: &CollisionEvent| c.penalty).sum();
    let result = RaceResult {
        raw_lap_time,
        total_time: raw_lap_time + penalty,
        collisions,
        overtakes_completed: overtakes,
        peak_speed,
        mean_speed: speed_sum / samples as f64,
        finished,
        off_track_at,
    };
    Ok(RaceOutcome {
        result,
        trace,
        timing: TimingStats {
            lidar: sw_lidar.stats(),
            perception: sw_perc.stats(),
            mpc: sw_mpc.stats(),
        },
        diverged,
    })
}
