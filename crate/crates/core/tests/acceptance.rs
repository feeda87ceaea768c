//! End-to-end acceptance checks. Runs without the test harness so that each
//! criterion prints exactly one PASS/FAIL line.

use std::f64::consts::{PI, TAU};
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use racestack::geometry::{OrientedBox, Pose, Segment, Vec2};
use racestack::harness::{cmd_race, RaceOptions, TRACE_FILE};
use racestack::lidar::{scan, LidarConfig};
use racestack::mpc::{dynamics, linearize, model_step, solve, ControlCommand, MpcConfig, VehicleState};
use racestack::perception::{classify, LaneOccupancy, SparseLane, SparseLaneSet};
use racestack::planner::{decide_with, publish_trajectory, Decision, Mode, PlannerConfig, PlannerState, Thresholds};
use racestack::raceline::{bending_energy, optimize_min_curvature, segment_lengths, velocity_profile, RacelineProblem};
use racestack::scenario::{NpcSpec, Scenario};
use racestack::sim::{car_box, run_race, RaceOutcome, RaceSetup};
use racestack::trace::{verify, Agent};
use racestack::track::{Lane, LaneId, TrackModel};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn race(sc: &Scenario) -> RaceOutcome {
    let setup = RaceSetup::build(sc, None).expect("scenario builds");
    run_race(&setup, sc).expect("race runs")
}

fn lane_changes(out: &RaceOutcome) -> Vec<f64> {
    out.trace
        .iter()
        .filter(|r| r.agent == Agent::Ego && r.decision.is_some_and(Decision::is_lane_change))
        .map(|r| r.t)
        .collect()
}

fn c1_end_to_end() -> Check {
    let sc = Scenario::default();
    let start = Instant::now();
    let out = race(&sc);
    let wall = start.elapsed().as_secs_f64();
    let r = &out.result;
    ensure!(r.finished, "lap not finished");
    ensure!(r.collisions.is_empty(), "{} collisions", r.collisions.len());
    ensure!(r.overtakes_completed == 5, "{} overtakes", r.overtakes_completed);
    ensure!(wall < 60.0, "wall time {wall:.1} s");
    let mut base = sc.clone();
    base.planner.switching = false;
    let b = race(&base).result;
    ensure!(b.finished, "baseline did not finish");
    let gain = 1.0 - r.total_time / b.total_time;
    ensure!(gain >= 0.03, "only {:.1}% faster than the baseline", 100.0 * gain);
    Ok(format!(
        "total {:.3} s vs baseline {:.3} s ({:.1}% faster), 5 overtakes, wall {wall:.2} s",
        r.total_time,
        b.total_time,
        100.0 * gain
    ))
}

fn c2_perception_budget() -> Check {
    let setup = RaceSetup::build(&Scenario::default(), None).unwrap();
    let resample = |lane: &Lane| {
        let poly = lane.polyline();
        let per = poly.perimeter();
        let pts: Vec<Vec2> = (0..200).map(|i| poly.point_at(per * i as f64 / 200.0)).collect();
        SparseLane::new(pts.iter().map(|p| p.x).collect(), pts.iter().map(|p| p.y).collect())
    };
    let sparse = SparseLaneSet {
        lanes: [resample(&setup.lanes[0]), resample(&setup.lanes[1]), resample(&setup.lanes[2])],
        stride: 0,
    };
    let ego = setup.start_pose(LaneId::Outer, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cloud = racestack::lidar::PointCloud {
        points: (0..20_000)
            .map(|_| Vec2::new(rng.random_range(-10.0..100.0), rng.random_range(-15.0..15.0)))
            .collect(),
        stamp: 0.1,
    };
    let calls = 100;
    let start = Instant::now();
    let mut kept = 0;
    for _ in 0..calls {
        let c = classify(&cloud, &ego, &sparse, 1.25);
        kept = c.counts.iter().sum::<u32>();
    }
    let mean_ms = start.elapsed().as_secs_f64() * 1e3 / calls as f64;
    ensure!(kept > 0, "no point was labelled");
    ensure!(mean_ms < 20.0, "mean {mean_ms:.2} ms per call");
    Ok(format!("{mean_ms:.2} ms per 20k-point call ({kept} labelled)"))
}

/// The switching rules restated from their prose description, one case at a
/// time. Returns the decision and the lane and mode afterwards.
fn rule_oracle(
    lane: usize,
    mode: Mode,
    clear_before: u32,
    paused: bool,
    l: [u32; 3],
    pre: [u32; 3],
    th: &Thresholds,
) -> (Decision, usize, Mode) {
    let id = |i: usize| LaneId::BASE[i];
    let occupied = |i: usize| l[i] > th.theta_o;
    let empty = |i: usize| l[i] < th.theta_e && pre[i] < th.theta_e;
    let all_clear = l[0] < th.theta_e && l[1] < th.theta_e && l[2] < th.theta_e;
    let clear = if all_clear { clear_before + 1 } else { 0 };

    if paused {
        let d = if occupied(lane) { Decision::BrakeDuringPause } else { Decision::Stay };
        return (d, lane, mode);
    }
    if mode == Mode::LaneFollow && clear >= 5 {
        return (Decision::EngageOptimized, lane, Mode::Optimized);
    }
    if !occupied(lane) {
        return (Decision::Stay, lane, mode);
    }
    let target = if lane == 1 {
        match (empty(0), empty(2)) {
            (true, true) => Some(if l[2] < l[0] { 2 } else { 0 }),
            (true, false) => Some(0),
            (false, true) => Some(2),
            (false, false) => None,
        }
    } else if empty(1) {
        Some(1)
    } else if empty(2 - lane) && l[1] < th.theta_o {
        Some(2 - lane)
    } else {
        None
    };
    match target {
        Some(t) => (Decision::Switch { from: id(lane), to: id(t) }, t, Mode::LaneFollow),
        None => (Decision::Brake, lane, Mode::LaneFollow),
    }
}

fn c3_switch_rule_oracle() -> Check {
    let cfg = PlannerConfig::default();
    let mut cases = 0;
    for th in [Thresholds::default(), Thresholds { theta_o: 9, theta_e: 3 }] {
        let vals = [0, th.theta_e - 1, th.theta_e, th.theta_o, th.theta_o + 1];
        let mut vectors = Vec::new();
        for a in vals {
            for b in vals {
                for c in vals {
                    vectors.push([a, b, c]);
                }
            }
        }
        let pres = [[0; 3], [th.theta_o + 1; 3]];
        let now = 50.0;
        for lane in 0..3 {
            for mode in [Mode::LaneFollow, Mode::Optimized] {
                for clear_before in [0, 4] {
                    for paused in [false, true] {
                        for pre in pres {
                            for l in &vectors {
                                let state = PlannerState {
                                    mode,
                                    current_lane: LaneId::BASE[lane],
                                    pause_until: if paused { now + 1.0 } else { now - 1.0 },
                                    clear_streak: clear_before,
                                    last_decision: Decision::Stay,
                                };
                                let occ = LaneOccupancy { counts: *l, prev: pre, stamp: now };
                                let (next, got) = decide_with(&state, &occ, &th, now, &cfg);
                                let (want, want_lane, want_mode) =
                                    rule_oracle(lane, mode, clear_before, paused, *l, pre, &th);
                                cases += 1;
                                ensure!(
                                    got == want && next.current_lane.index() == want_lane && next.mode == want_mode,
                                    "lane {lane} {mode:?} clear {clear_before} paused {paused} l={l:?} pre={pre:?}: got {got}, want {want}"
                                );
                                let restarts = want.is_lane_change();
                                let pause_ok = if restarts {
                                    next.pause_until == now + cfg.pause_s
                                } else {
                                    next.pause_until == state.pause_until
                                };
                                ensure!(pause_ok, "pause window wrong for l={l:?}");
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{cases} cases, 0 mismatches"))
}

fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sc = Scenario::default();
    sc.seed = seed;
    sc.npcs = (0..5)
        .map(|i| NpcSpec {
            lane: LaneId::BASE[rng.random_range(0..3)],
            target_speed: rng.random_range(28.0..38.0),
            start_arc: 30.0 + 40.0 * i as f64 + rng.random_range(0.0..15.0),
            lane_changes: vec![],
        })
        .collect();
    sc
}

fn c4_pause_invariant() -> Check {
    let mut changes = 0;
    for seed in 0..20 {
        let sc = random_scenario(seed);
        let out = race(&sc);
        let t = lane_changes(&out);
        changes += t.len();
        for w in t.windows(2) {
            ensure!(w[1] - w[0] >= 10.0, "seed {seed}: lane changes at {} and {}", w[0], w[1]);
        }
        let issues = verify(&out.trace, &sc.thresholds, sc.planner.pause_s, sc.planner.engage_streak);
        ensure!(issues.is_empty(), "seed {seed}: {}", issues[0]);
    }
    ensure!(changes >= 20, "only {changes} lane changes in 20 races");
    Ok(format!("20 races, {changes} lane changes, all ≥ 10 s apart"))
}

fn c5_engagement() -> Check {
    let mut sc = Scenario::default();
    sc.npcs.clear();
    let out = race(&sc);
    let engages: Vec<f64> = out
        .trace
        .iter()
        .filter(|r| r.agent == Agent::Ego && r.decision == Some(Decision::EngageOptimized))
        .map(|r| r.t)
        .collect();
    ensure!(engages.len() == 1, "{} engagements", engages.len());
    ensure!((engages[0] - 0.5).abs() < 1e-9, "engaged at t = {}", engages[0]);
    let before = out
        .trace
        .iter()
        .filter(|r| r.agent == Agent::Ego && r.t < 0.5 && r.decision.is_some())
        .count();
    ensure!(before == 4, "{before} scans before engaging");
    Ok("engaged on the 5th clear scan at t = 0.5 s".into())
}

fn c6_linearization() -> Check {
    let (dt, wb) = (0.06, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut worst_order = f64::INFINITY;
    for _ in 0..100 {
        let z = Vector4::new(
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
            rng.random_range(-PI..PI),
            rng.random_range(1.0..55.0),
        );
        let u = Vector2::new(rng.random_range(-8.0..8.0), rng.random_range(-0.34..0.34));
        let (a, b) = linearize(&z, &u, dt, wb).map_err(|e| e.to_string())?;
        let h = 1e-6;
        for j in 0..6 {
            let (mut dz, mut du) = (Vector4::zeros(), Vector2::zeros());
            if j < 4 {
                dz[j] = h;
            } else {
                du[j - 4] = h;
            }
            let fd = (model_step(&(z + dz), &(u + du), dt, wb) - model_step(&(z - dz), &(u - du), dt, wb)) / (2.0 * h);
            for i in 0..4 {
                let an = if j < 4 { a[(i, j)] } else { b[(i, j - 4)] };
                let rel = (fd[i] - an).abs() / an.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
        // Taylor remainder of the linear model must shrink quadratically.
        let dz = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let du = Vector2::from_fn(|_, _| rng.random_range(-1.0..1.0)).component_mul(&Vector2::new(1.0, 0.05));
        let f0 = model_step(&z, &u, dt, wb);
        let rem = |eps: f64| (model_step(&(z + dz * eps), &(u + du * eps), dt, wb) - f0 - (a * dz + b * du) * eps).norm();
        let (r1, r2) = (rem(0.02), rem(0.01));
        if r1 > 1e-11 {
            worst_order = worst_order.min((r1 / r2).log2());
        }
    }
    ensure!(worst < 1e-4, "relative Jacobian error {worst:e}");
    ensure!(worst_order >= 1.9, "remainder order {worst_order:.3}");
    Ok(format!("max rel error {worst:.1e}, min order {worst_order:.3}"))
}

/// Closed loop at 100 Hz physics and 50 Hz control; returns (t, lateral
/// error) samples.
fn track_closed_loop(lane: &Lane, start: VehicleState, secs: f64) -> Vec<(f64, f64)> {
    let cfg = MpcConfig::default();
    let poly = lane.polyline();
    let mut s = start;
    let mut cmd = ControlCommand::default();
    let mut out = Vec::new();
    for k in 0..(secs * 100.0).round() as usize {
        if k % 2 == 0 {
            let seg = publish_trajectory(lane, &s.position(), 100.0);
            cmd = solve(&s, &seg, &cfg, cmd).unwrap().command;
        }
        s = dynamics(&s, &cmd, &cfg, 0.01);
        out.push(((k + 1) as f64 * 0.01, poly.project(&s.position()).lateral));
    }
    out
}

fn c7_mpc_tracking() -> Check {
    // A long oval whose straight runs along y = 0 from x = -1000 to 1000.
    let mut pts = Vec::new();
    for i in 0..1000 {
        pts.push(Vec2::new(-1000.0 + 2.0 * i as f64, 0.0));
    }
    for i in 0..=314 {
        let a = -PI / 2.0 + PI * i as f64 / 314.0;
        pts.push(Vec2::new(1000.0 + 100.0 * a.cos(), 100.0 + 100.0 * a.sin()));
    }
    for i in 1..1000 {
        pts.push(Vec2::new(1000.0 - 2.0 * i as f64, 200.0));
    }
    for i in 0..314 {
        let a = PI / 2.0 + PI * i as f64 / 314.0;
        pts.push(Vec2::new(-1000.0 + 100.0 * a.cos(), 100.0 + 100.0 * a.sin()));
    }
    let straight = Lane::from_points(LaneId::Center, &pts, 2.0, 30.0).map_err(|e| e.to_string())?;
    let run = track_closed_loop(&straight, VehicleState::new(-800.0, 1.0, 0.0, 30.0), 6.0);
    let settled = run.iter().filter(|(t, _)| *t >= 3.0).map(|e| e.1.abs()).fold(0.0, f64::max);
    ensure!(settled < 0.05, "straight error after 3 s: {settled:.4} m");

    let r = 200.0;
    let circle: Vec<Vec2> = (0..720)
        .map(|i| {
            let a = TAU * i as f64 / 720.0;
            Vec2::new(r * a.cos(), r * a.sin())
        })
        .collect();
    let ring = Lane::from_points(LaneId::Center, &circle, 2.0, 30.0).map_err(|e| e.to_string())?;
    let run = track_closed_loop(&ring, VehicleState::new(r, 0.0, PI / 2.0, 30.0), 25.0);
    let steady = run.iter().filter(|(t, _)| *t >= 15.0).map(|e| e.1.abs()).fold(0.0, f64::max);
    ensure!(steady < 0.3, "circle steady-state error {steady:.4} m");
    Ok(format!("straight {settled:.4} m after 3 s, circle {steady:.4} m"))
}

fn c8_raceline_annulus() -> Check {
    let n = 315;
    let centerline: Vec<Vec2> = (0..n)
        .map(|i| {
            let a = TAU * i as f64 / n as f64;
            Vec2::new(100.0 * a.cos(), 100.0 * a.sin())
        })
        .collect();
    let spacing = TAU * 100.0 / n as f64;
    let track = TrackModel::new(centerline.clone(), vec![7.5; n], vec![7.5; n], spacing).map_err(|e| e.to_string())?;
    let problem = RacelineProblem::new(track, 0.95).with_uniform_alpha_max(5.0);
    let opt = optimize_min_curvature(&problem).map_err(|e| e.to_string())?;
    let k = 1.0 / 105.0;
    let worst = opt
        .lane
        .waypoints
        .iter()
        .map(|w| (w.curvature.abs() - k).abs() / k)
        .fold(0.0, f64::max);
    ensure!(worst < 0.02, "curvature off by {:.2}%", 100.0 * worst);
    let (e_opt, e_c) = (bending_energy(&opt.lane.positions()), bending_energy(&centerline));
    ensure!(e_opt < e_c, "bending energy {e_opt} not below {e_c}");
    Ok(format!("curvature within {:.3}% of 1/105, energy {e_opt:.5} < {e_c:.5}", 100.0 * worst))
}

fn c9_velocity_profile() -> Check {
    let sc = Scenario::default();
    let setup = RaceSetup::build(&sc, None).unwrap();
    let lim = &sc.speed_limits;
    let tol = 1e-9;
    for lane in &setup.lanes {
        let v: Vec<f64> = lane.waypoints.iter().map(|w| w.target_speed).collect();
        let ds = segment_lengths(lane);
        let n = v.len();
        for i in 0..n {
            let j = (i + 1) % n;
            let k = lane.waypoints[i].curvature.abs();
            ensure!(v[i] <= lim.v_cap + tol, "{}: v_cap exceeded at {i}", lane.id);
            if k > 0.0 {
                ensure!(v[i] <= (lim.a_lat_max / k).sqrt() + tol, "{}: lateral limit at {i}", lane.id);
            }
            ensure!(
                v[j] * v[j] <= v[i] * v[i] + 2.0 * lim.a_accel_max * ds[i] + tol,
                "{}: acceleration limit at {i}",
                lane.id
            );
            ensure!(
                v[i] * v[i] <= v[j] * v[j] + 2.0 * lim.a_brake_max * ds[i] + tol,
                "{}: braking limit at {i}",
                lane.id
            );
        }
        let again = velocity_profile(lane, lim);
        ensure!(again.waypoints == lane.waypoints, "{}: profile not idempotent", lane.id);
    }
    Ok("4 lanes satisfy the speed inequalities and are idempotent".into())
}

fn c10_penalties() -> Check {
    let mut gaps = Vec::new();
    for k in 1..=3 {
        let mut sc = Scenario::default();
        sc.planner.switching = false;
        sc.npcs = (0..k)
            .map(|i| NpcSpec {
                lane: LaneId::Outer,
                target_speed: 0.0,
                start_arc: 200.0 + 300.0 * i as f64,
                lane_changes: vec![],
            })
            .collect();
        let r = race(&sc).result;
        ensure!(r.finished, "k={k}: lap not finished");
        ensure!(r.collisions.len() == k, "k={k}: {} collisions", r.collisions.len());
        let gap = r.total_time - r.raw_lap_time;
        ensure!((gap - 5.0 * k as f64).abs() < 1e-9, "k={k}: penalty {gap}");
        gaps.push(gap);
    }
    Ok(format!("penalties {gaps:?}"))
}

fn c11_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str, seed: Option<u64>| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let opts = RaceOptions { seed, ..Default::default() };
        cmd_race(None, &out, &opts).map_err(|e| e.to_string())?;
        std::fs::read(out.join(TRACE_FILE)).map_err(|e| e.to_string())
    };
    let a = run("a", None)?;
    let b = run("b", None)?;
    ensure!(a == b, "traces of identical runs differ");
    let c = run("c", Some(7))?;
    ensure!(a != c, "changing the seed changed nothing");
    // The decision function takes no seed; its rule table is re-checked.
    c3_switch_rule_oracle()?;
    let rows = racestack::trace::read_trace(c.as_slice()).map_err(|e| e.to_string())?;
    let sc = Scenario::default();
    let issues = verify(&rows, &sc.thresholds, sc.planner.pause_s, sc.planner.engage_streak);
    ensure!(issues.is_empty(), "seed 7 trace: {}", issues[0]);
    Ok(format!("{} identical bytes; seed 7 differs and keeps the rule table", a.len()))
}

fn on_geometry(p: &Vec2, segs: &[Segment]) -> bool {
    segs.iter().any(|s| s.distance_to(p) < 1e-9)
}

fn c12_lidar_geometry() -> Check {
    let setup = RaceSetup::build(&Scenario::default(), None).unwrap();
    let walls = setup.track.walls();
    let cfg = LidarConfig {
        noise_sigma: 0.0,
        ..LidarConfig::default()
    };
    let ego = setup.start_pose(LaneId::Outer, 0.0);
    let cars: Vec<OrientedBox> = [(LaneId::Outer, 25.0), (LaneId::Center, 40.0), (LaneId::Inner, 70.0)]
        .iter()
        .map(|(id, arc)| {
            let p = setup.start_pose(*id, *arc);
            car_box(&VehicleState::new(p.x, p.y, p.yaw, 0.0))
        })
        .collect();
    let mut segs: Vec<Segment> = walls.clone();
    for c in &cars {
        segs.extend_from_slice(&c.edges());
    }
    let cloud = scan(&ego, &cars, &walls, &cfg, 0.1);
    for p in &cloud.points {
        let w = ego.to_world(p);
        ensure!(on_geometry(&w, &segs), "return at ({:.3}, {:.3}) hits nothing", w.x, w.y);
    }

    // A car hidden straight behind another on a straight returns nothing.
    let ego = Pose::new(0.0, 0.0, 0.0);
    let front = OrientedBox::new(Vec2::new(20.0, 0.0), 0.0, 5.0, 1.9);
    let hidden = OrientedBox::new(Vec2::new(40.0, 0.0), 0.0, 5.0, 1.9);
    let both = scan(&ego, &[front, hidden], &[], &cfg, 0.1);
    let on_hidden = both
        .points
        .iter()
        .filter(|p| hidden.edges().iter().any(|s| s.distance_to(p) < 1e-9))
        .count();
    ensure!(on_hidden == 0, "{on_hidden} returns from the occluded car");
    let alone = scan(&ego, &[hidden], &[], &cfg, 0.1);
    ensure!(!alone.is_empty(), "unoccluded car is invisible");
    Ok(format!("{} returns on geometry; occluded car 0 of {} points", cloud.len(), alone.len()))
}

fn c13_speed_regime() -> Check {
    let sc = Scenario::default();
    let setup = RaceSetup::build(&sc, None).unwrap();
    let out = run_race(&setup, &sc).unwrap();
    let line = setup.lane(LaneId::Optimized);
    let ideal_mean = line.length() / line.ideal_time();
    let r = &out.result;
    ensure!(r.peak_speed > 45.0, "peak {:.2} m/s", r.peak_speed);
    ensure!(
        r.mean_speed > 0.8 * ideal_mean,
        "mean {:.2} m/s vs ideal {ideal_mean:.2}",
        r.mean_speed
    );
    Ok(format!(
        "peak {:.2} m/s, mean {:.2} m/s (ideal raceline mean {ideal_mean:.2})",
        r.peak_speed, r.mean_speed
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 13] = [
        ("end-to-end race", c1_end_to_end),
        ("perception budget", c2_perception_budget),
        ("switch rule oracle", c3_switch_rule_oracle),
        ("pause invariant", c4_pause_invariant),
        ("raceline engagement", c5_engagement),
        ("MPC linearization", c6_linearization),
        ("MPC tracking", c7_mpc_tracking),
        ("raceline annulus", c8_raceline_annulus),
        ("velocity profile", c9_velocity_profile),
        ("collision penalties", c10_penalties),
        ("determinism", c11_determinism),
        ("LiDAR geometry", c12_lidar_geometry),
        ("speed regime", c13_speed_regime),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    let _ = panic::take_hook();
    if failed > 0 {
        println!("{failed} of {} acceptance criteria failed", criteria.len());
        std::process::exit(1);
    }
}
