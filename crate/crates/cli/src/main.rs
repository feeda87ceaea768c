use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use racestack::harness::{self, RaceOptions, EXIT_CONFIG, EXIT_NOT_CLEAN};
use racestack::scenario::Scenario;
use racestack::Result;

const CONFIG_KEYS: &str = "\
SCENARIO FILE (JSON; every key optional, unknown keys are rejected)
  seed                      LiDAR noise seed (42)
  max_time                  sim time limit in s (120)
  inject_latency            delay planner output by one control tick (false)
  track.centerline          CSV x_m,y_m,w_tr_right_m,w_tr_left_m; relative to the scenario file
  track.straight_length     oval straight length in m when no centerline (300)
  track.turn_radius         oval turn radius in m (100)
  track.width               oval track width in m (15)
  track.spacing             waypoint spacing in m (2)
  raceline.car_half_width   edge clearance of the raceline in m (0.95)
  raceline.iterations       optimizer iteration cap (2000)
  speed_limits.v_cap        m/s (50)
  speed_limits.a_lat_max    m/s^2 (12)
  speed_limits.a_accel_max  m/s^2 (6)
  speed_limits.a_brake_max  m/s^2 (10)
  npcs[]                    {lane, target_speed, start_arc, lane_changes: [{time, lane}]}
                            lanes: inner | center | outer (default: five opponents)
  npc_control.lookahead_min pure-pursuit lookahead floor in m (5)
  npc_control.lookahead_time lookahead per unit speed in s (0.6)
  npc_control.speed_gain    proportional speed gain in 1/s (1)
  ego.lane                  inner | center | outer | optimized (outer)
  ego.start_arc             centerline arc of the start in m (0)
  ego.start_speed           m/s (start lane profile speed)
  rates.physics             Hz (100)
  rates.control             Hz, must divide physics (50)
  rates.lidar               Hz, must divide physics (10)
  thresholds.theta_o        lane occupied above this point count (6)
  thresholds.theta_e        lane empty below this point count (2)
  planner.switching         false: never switch or engage, only brake (true)
  planner.pause_s           minimum time between lane changes in s (10)
  planner.engage_streak     clear scans before engaging the raceline (5)
  planner.brake_factor      speed scale when braking (0.6)
  planner.v_min_follow      braking speed floor in m/s (15)
  planner.horizon_length    published segment length in m (100)
  planner.sparse_stride     waypoint stride of the perception lanes (10)
  perception.x_min          crop, ego frame, m (-10)
  perception.x_max          crop, ego frame, m (100)
  perception.lane_reject_halfwidth  max distance to a lane in m (1.25)
  mpc.horizon, mpc.dt       prediction steps (25) and step in s (0.06)
  mpc.wheelbase             m (3)
  mpc.delta_max             steering limit in rad (0.35)
  mpc.delta_rate_max        steering rate limit in rad/s (0.8)
  mpc.a_cmd_max             acceleration limit in m/s^2 (10)
  mpc.a_lat_cmd_max         steering cap as lateral acceleration in m/s^2 (25)
  mpc.v_max                 m/s (60)
  mpc.w_pos, mpc.w_yaw, mpc.w_v        state weights (0.75, 0.75, 1)
  mpc.w_accel, mpc.w_delta             input weights (0.1, 20)
  lidar.beam_count          (720)
  lidar.fov                 rad (2 pi)
  lidar.max_range           m (120)
  lidar.rate                Hz (10)
  lidar.noise_sigma         range noise in m (0.02)

EXIT STATUS (race)
  0 finished without contact, 1 otherwise, 2 configuration error, 3 divergence";

#[derive(Parser)]
#[command(name = "racestack", version, about = "Lane-switching overtake race simulator", after_help = CONFIG_KEYS)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the inner, center, outer and optimized lane CSVs.
    BuildLanes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Track CSV overriding the scenario's track.
        #[arg(long)]
        centerline: Option<PathBuf>,
        /// Uniform bound on the raceline's offset from the centerline, m.
        #[arg(long)]
        alpha_max: Option<f64>,
    },
    /// Write only the optimized raceline CSV.
    Raceline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        centerline: Option<PathBuf>,
    },
    /// Run one lap and write report.json and trace.csv.
    #[command(after_help = CONFIG_KEYS)]
    Race {
        /// Scenario JSON; the built-in default when omitted.
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write race.svg.
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        inject_latency: bool,
    },
    /// Render a trace and lane directory to SVG.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        lanes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-check the planner invariants on a trace.
    #[command(hide = true)]
    VerifyTrace {
        trace: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

fn load(scenario: Option<&Path>, centerline: Option<PathBuf>) -> Result<(Scenario, Option<PathBuf>)> {
    let (mut sc, base) = match scenario {
        Some(p) => (Scenario::load(p)?, p.parent().map(Path::to_path_buf)),
        None => (Scenario::default(), None),
    };
    if centerline.is_some() {
        sc.track.centerline = centerline;
        return Ok((sc, None));
    }
    Ok((sc, base))
}

fn note_lanes(b: &harness::LaneBuild) {
    if !b.converged {
        eprintln!("note: raceline optimizer stopped after {} iterations without converging", b.iterations);
    }
    for p in &b.paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::BuildLanes {
            out,
            scenario,
            centerline,
            alpha_max,
        } => {
            let (sc, base) = load(scenario.as_deref(), centerline)?;
            note_lanes(&harness::cmd_build_lanes(&sc, base.as_deref(), &out, alpha_max)?);
            Ok(0)
        }
        Cmd::Raceline {
            out,
            scenario,
            centerline,
        } => {
            let (sc, base) = load(scenario.as_deref(), centerline)?;
            note_lanes(&harness::cmd_raceline(&sc, base.as_deref(), &out)?);
            Ok(0)
        }
        Cmd::Race {
            scenario,
            out,
            seed,
            svg,
            inject_latency,
        } => {
            let opts = RaceOptions {
                seed,
                svg,
                inject_latency,
            };
            let report = harness::cmd_race(scenario.as_deref(), &out, &opts)?;
            let r = &report.result;
            println!(
                "finished={} raw={:.3}s total={:.3}s collisions={} overtakes={} peak={:.1}m/s mean={:.1}m/s perception={:.2}ms mpc={:.3}ms",
                r.finished,
                r.raw_lap_time,
                r.total_time,
                r.collisions.len(),
                r.overtakes_completed,
                r.peak_speed,
                r.mean_speed,
                report.timing.perception.mean_ms,
                report.timing.mpc.mean_ms
            );
            if let Some(d) = &report.diverged {
                eprintln!("diverged: {d}");
            }
            println!("{}", report.artifacts.report.display());
            Ok(report.exit_code)
        }
        Cmd::Plot { trace, lanes, out } => {
            harness::cmd_plot(&trace, &lanes, &out)?;
            println!("{}", out.display());
            Ok(0)
        }
        Cmd::VerifyTrace { trace, scenario } => {
            let (sc, _) = load(scenario.as_deref(), None)?;
            let issues = harness::verify_trace(&trace, &sc)?;
            for i in &issues {
                println!("{i}");
            }
            Ok(if issues.is_empty() { 0 } else { EXIT_NOT_CLEAN })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    };
    ExitCode::from(code as u8)
}
