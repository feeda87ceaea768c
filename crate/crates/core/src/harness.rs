//! File-level commands behind the command-line front end: lane building,
//! race runs with their report and trace, plotting and trace checking.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plot::{lateral_errors, render_svg};
use crate::raceline::{optimize_min_curvature, velocity_profile, RacelineProblem};
use crate::scenario::Scenario;
use crate::sim::{run_race, RaceResult, RaceSetup, TimingStats};
use crate::trace::{read_trace, verify, write_trace, TraceRow};
use crate::track::{Lane, LaneId};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_NOT_CLEAN: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SVG_FILE: &str = "race.svg";

pub fn lane_file(id: LaneId) -> String {
    format!("{}.csv", id.name())
}

#[derive(Debug, Clone)]
pub struct LaneBuild {
    pub paths: Vec<PathBuf>,
    pub converged: bool,
    pub iterations: usize,
}

/// The four speed-profiled lanes for the scenario's track. `alpha_max`
/// replaces the width-derived raceline bound with a uniform one.
pub fn build_lanes(sc: &Scenario, base: Option<&Path>, alpha_max: Option<f64>) -> Result<([Lane; 4], bool, usize)> {
    sc.validate()?;
    let track = sc.track.build(base)?;
    let limits = &sc.speed_limits;
    let mut problem = RacelineProblem::new(track.clone(), sc.raceline.car_half_width);
    problem.iterations = sc.raceline.iterations;
    if let Some(a) = alpha_max {
        problem = problem.with_uniform_alpha_max(a);
    }
    let opt = optimize_min_curvature(&problem)?;
    let iterations = opt.iterations();
    let [inner, center, outer] = track.base_lanes(limits.v_cap)?;
    let lanes = [inner, center, outer, opt.lane].map(|l| velocity_profile(&l, limits));
    Ok((lanes, opt.converged, iterations))
}

/// Writes `inner.csv`, `center.csv`, `outer.csv` and `optimized.csv`.
pub fn cmd_build_lanes(
    sc: &Scenario,
    base: Option<&Path>,
    out_dir: &Path,
    alpha_max: Option<f64>,
) -> Result<LaneBuild> {
    let (lanes, converged, iterations) = build_lanes(sc, base, alpha_max)?;
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for lane in &lanes {
        let path = out_dir.join(lane_file(lane.id));
        let mut w = BufWriter::new(File::create(&path)?);
        lane.write_csv(&mut w)?;
        w.flush()?;
        paths.push(path);
    }
    Ok(LaneBuild {
        paths,
        converged,
        iterations,
    })
}

/// Writes only the optimized lane to `out`.
pub fn cmd_raceline(sc: &Scenario, base: Option<&Path>, out: &Path) -> Result<LaneBuild> {
    let (lanes, converged, iterations) = build_lanes(sc, base, None)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(out)?);
    lanes[3].write_csv(&mut w)?;
    w.flush()?;
    Ok(LaneBuild {
        paths: vec![out.to_path_buf()],
        converged,
        iterations,
    })
}

pub fn read_lanes(dir: &Path) -> Result<Vec<Lane>> {
    LaneId::ALL
        .iter()
        .map(|id| {
            let path = dir.join(lane_file(*id));
            let f = File::open(&path).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
            })?;
            Lane::read_csv(*id, BufReader::new(f))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RaceOptions {
    pub seed: Option<u64>,
    pub svg: bool,
    pub inject_latency: bool,
}

impl RaceOptions {
    pub fn apply(&self, sc: &mut Scenario) {
        if let Some(seed) = self.seed {
            sc.seed = seed;
        }
        sc.inject_latency |= self.inject_latency;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingStats {
    /// Largest |lateral error| of the ego to the lane it was tracking.
    pub max_lateral_error_m: f64,
    pub mean_lateral_error_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub report: PathBuf,
    pub trace: PathBuf,
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub result: RaceResult,
    pub exit_code: i32,
    pub diverged: Option<String>,
    pub timing: TimingStats,
    pub wall_time_s: f64,
    pub tracking: TrackingStats,
    pub raceline_converged: bool,
    pub config: Scenario,
    pub artifacts: Artifacts,
}

pub fn exit_code(result: &RaceResult, diverged: bool) -> i32 {
    if diverged {
        EXIT_DIVERGED
    } else if result.is_clean() {
        EXIT_CLEAN
    } else {
        EXIT_NOT_CLEAN
    }
}

fn tracking_stats(lanes: &[Lane], rows: &[TraceRow]) -> TrackingStats {
    let errs = lateral_errors(lanes, rows);
    let n = errs.len().max(1) as f64;
    TrackingStats {
        max_lateral_error_m: errs.iter().map(|e| e.1.abs()).fold(0.0, f64::max),
        mean_lateral_error_m: errs.iter().map(|e| e.1.abs()).sum::<f64>() / n,
    }
}

/// Loads the scenario (the default one when `path` is `None`), applies the
/// overrides and runs it. Nothing is written unless the scenario is valid.
pub fn cmd_race(path: Option<&Path>, out_dir: &Path, opts: &RaceOptions) -> Result<RunReport> {
    let (mut sc, base) = match path {
        Some(p) => (Scenario::load(p)?, p.parent().map(Path::to_path_buf)),
        None => (Scenario::default(), None),
    };
    opts.apply(&mut sc);
    race_scenario(&sc, base.as_deref(), out_dir, opts.svg)
}

pub fn race_scenario(sc: &Scenario, base: Option<&Path>, out_dir: &Path, svg: bool) -> Result<RunReport> {
    let start = Instant::now();
    let setup = RaceSetup::build(sc, base)?;
    let out = run_race(&setup, sc)?;
    let wall_time_s = start.elapsed().as_secs_f64();

    fs::create_dir_all(out_dir)?;
    let artifacts = Artifacts {
        report: out_dir.join(REPORT_FILE),
        trace: out_dir.join(TRACE_FILE),
        svg: svg.then(|| out_dir.join(SVG_FILE)),
    };
    let mut w = BufWriter::new(File::create(&artifacts.trace)?);
    write_trace(&out.trace, &mut w)?;
    w.flush()?;
    drop(w);

    if let Some(p) = &artifacts.svg {
        fs::write(p, render_svg(&setup.lanes, &out.trace)?)?;
    }

    let report = RunReport {
        exit_code: exit_code(&out.result, out.diverged.is_some()),
        tracking: tracking_stats(&setup.lanes, &out.trace),
        result: out.result,
        diverged: out.diverged,
        timing: out.timing,
        wall_time_s,
        raceline_converged: setup.raceline_converged,
        config: sc.clone(),
        artifacts,
    };
    fs::write(&report.artifacts.report, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRow>> {
    read_trace(BufReader::new(File::open(path)?))
}

pub fn cmd_plot(trace: &Path, lanes_dir: &Path, out_svg: &Path) -> Result<()> {
    let rows = load_trace(trace)?;
    let lanes = read_lanes(lanes_dir)?;
    fs::write(out_svg, render_svg(&lanes, &rows)?)?;
    Ok(())
}

/// Planner invariant violations in a trace file, judged with the
/// scenario's thresholds and pause settings.
pub fn verify_trace(trace: &Path, sc: &Scenario) -> Result<Vec<String>> {
    let rows = load_trace(trace)?;
    Ok(verify(&rows, &sc.thresholds, sc.planner.pause_s, sc.planner.engage_streak))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Scenario {
        let mut sc = Scenario::default();
        sc.track.straight_length = 100.0;
        sc.track.turn_radius = 60.0;
        sc.npcs.clear();
        sc
    }

    #[test]
    fn zero_alpha_raceline_is_the_center_lane() {
        let dir = tempfile::tempdir().unwrap();
        let b = cmd_build_lanes(&small(), None, dir.path(), Some(0.0)).unwrap();
        assert_eq!(b.paths.len(), 4);
        let lanes = read_lanes(dir.path()).unwrap();
        assert_eq!(lanes[1].len(), lanes[3].len());
        for (c, o) in lanes[1].waypoints.iter().zip(&lanes[3].waypoints) {
            assert!((c.x - o.x).abs() < 1e-9 && (c.y - o.y).abs() < 1e-9);
            assert!((c.heading - o.heading).abs() < 1e-9);
            assert!((c.curvature - o.curvature).abs() < 1e-9);
            assert!((c.target_speed - o.target_speed).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_scenario_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let scen = dir.path().join("bad.json");
        fs::write(&scen, r#"{"npcs": [], "speed": 3}"#).unwrap();
        let out = dir.path().join("out");
        assert!(cmd_race(Some(&scen), &out, &RaceOptions::default()).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn exit_codes() {
        let mut r = RaceResult {
            raw_lap_time: 30.0,
            collisions: vec![],
            total_time: 30.0,
            overtakes_completed: 0,
            peak_speed: 40.0,
            mean_speed: 35.0,
            finished: true,
            off_track_at: None,
        };
        assert_eq!(exit_code(&r, false), EXIT_CLEAN);
        assert_eq!(exit_code(&r, true), EXIT_DIVERGED);
        r.finished = false;
        assert_eq!(exit_code(&r, false), EXIT_NOT_CLEAN);
    }
}
