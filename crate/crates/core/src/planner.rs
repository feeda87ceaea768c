//! Lane-switching overtake planner.
//!
//! Each LiDAR scan yields lane occupancy counts `l = [l0, l1, l2]` (inner,
//! center, outer) plus the previous scan's counts. A lane is occupied above
//! `theta_o` and empty below `theta_e`. Rules, in priority order:
//!
//! 1. Inside the pause window after a switch no switch is issued. The ego
//!    may still brake if its own lane is occupied.
//! 2. After five consecutive scans with every lane empty, engage the
//!    optimized raceline.
//! 3. On the raceline, an occupied effective lane drops back to lane
//!    following and rule 4 is evaluated on the same scan.
//! 4. If the current lane is occupied, switch to the first admissible
//!    target (empty now and on the previous scan). From the center lane
//!    both neighbors are candidates; from a side lane the center lane is
//!    preferred and crossing to the far lane also needs the center lane
//!    below `theta_o`. Without an admissible target, brake.
//! 5. Otherwise stay.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::perception::LaneOccupancy;
use crate::track::{project, Lane, LaneId, Waypoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub theta_o: u32,
    pub theta_e: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        // A car's rear face returns about 218/d points at 720 beams, so a
        // lane becomes occupied roughly 30 m ahead.
        Self {
            theta_o: 6,
            theta_e: 2,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.theta_e == 0 || self.theta_e > self.theta_o {
            return Err(Error::Config("thresholds need 0 < theta_e ≤ theta_o".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// When false the ego never switches or engages the raceline; it only
    /// brakes behind traffic in its lane.
    pub switching: bool,
    pub pause_s: f64,
    pub engage_streak: u32,
    pub brake_factor: f64,
    pub v_min_follow: f64,
    pub horizon_length: f64,
    pub sparse_stride: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            switching: true,
            pause_s: 10.0,
            engage_streak: 5,
            brake_factor: 0.6,
            v_min_follow: 15.0,
            horizon_length: 100.0,
            sparse_stride: 10,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pause_s >= 0.0)
            || self.engage_streak == 0
            || !(self.brake_factor > 0.0 && self.brake_factor <= 1.0)
            || !(self.v_min_follow >= 0.0)
            || !(self.horizon_length > 0.0)
            || self.sparse_stride == 0
        {
            return Err(Error::Config("invalid planner settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    LaneFollow,
    Optimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Stay,
    Switch { from: LaneId, to: LaneId },
    EngageOptimized,
    Brake,
    /// Own lane occupied while the pause window blocks switching.
    BrakeDuringPause,
}

impl Decision {
    pub fn is_brake(self) -> bool {
        matches!(self, Decision::Brake | Decision::BrakeDuringPause)
    }

    /// Decisions that start the pause window.
    pub fn is_lane_change(self) -> bool {
        matches!(self, Decision::Switch { .. } | Decision::EngageOptimized)
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Stay => f.write_str("stay"),
            Decision::Switch { from, to } => write!(f, "switch_{}_{}", from.index(), to.index()),
            Decision::EngageOptimized => f.write_str("engage"),
            Decision::Brake => f.write_str("brake"),
            Decision::BrakeDuringPause => f.write_str("brake_pause"),
        }
    }
}

impl FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "stay" => Decision::Stay,
            "engage" => Decision::EngageOptimized,
            "brake" => Decision::Brake,
            "brake_pause" => Decision::BrakeDuringPause,
            _ => {
                let bad = || Error::Trace(format!("unknown decision '{s}'"));
                let rest = s.strip_prefix("switch_").ok_or_else(bad)?;
                let (a, b) = rest.split_once('_').ok_or_else(bad)?;
                let lane = |t: &str| {
                    t.parse::<usize>()
                        .ok()
                        .and_then(LaneId::from_index)
                        .filter(|l| *l != LaneId::Optimized)
                        .ok_or_else(bad)
                };
                let (from, to) = (lane(a)?, lane(b)?);
                if from == to {
                    return Err(bad());
                }
                Decision::Switch { from, to }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerState {
    pub mode: Mode,
    /// Lane being followed; while on the raceline, the effective lane.
    pub current_lane: LaneId,
    pub pause_until: f64,
    pub clear_streak: u32,
    pub last_decision: Decision,
}

impl PlannerState {
    pub fn new(lane: LaneId) -> Self {
        Self {
            mode: Mode::LaneFollow,
            current_lane: lane,
            pause_until: f64::NEG_INFINITY,
            clear_streak: 0,
            last_decision: Decision::Stay,
        }
    }

    /// Lane whose waypoints the controller should track.
    pub fn active_lane(&self) -> LaneId {
        match self.mode {
            Mode::LaneFollow => self.current_lane,
            Mode::Optimized => LaneId::Optimized,
        }
    }
}

/// [`decide_with`] under the default planner settings.
pub fn decide(
    state: &PlannerState,
    occ: &LaneOccupancy,
    th: &Thresholds,
    now: f64,
) -> (PlannerState, Decision) {
    decide_with(state, occ, th, now, &PlannerConfig::default())
}

pub fn decide_with(
    state: &PlannerState,
    occ: &LaneOccupancy,
    th: &Thresholds,
    now: f64,
    cfg: &PlannerConfig,
) -> (PlannerState, Decision) {
    let mut next = *state;
    let l = occ.counts;
    let all_empty = l.iter().all(|c| *c < th.theta_e);
    next.clear_streak = if all_empty { state.clear_streak + 1 } else { 0 };

    let decision = rules(&mut next, occ, th, now, cfg);
    next.last_decision = decision;
    (next, decision)
}

fn rules(
    next: &mut PlannerState,
    occ: &LaneOccupancy,
    th: &Thresholds,
    now: f64,
    cfg: &PlannerConfig,
) -> Decision {
    let l = occ.counts;
    let s = next.current_lane;
    let own_occupied = l[s.index()] > th.theta_o;

    if now < next.pause_until {
        return if own_occupied {
            Decision::BrakeDuringPause
        } else {
            Decision::Stay
        };
    }

    if !cfg.switching {
        return if own_occupied { Decision::Brake } else { Decision::Stay };
    }

    if next.mode == Mode::LaneFollow && next.clear_streak >= cfg.engage_streak {
        next.mode = Mode::Optimized;
        next.pause_until = now + cfg.pause_s;
        return Decision::EngageOptimized;
    }

    if !own_occupied {
        return Decision::Stay;
    }
    // Occupied effective lane on the raceline: back to lane following.
    next.mode = Mode::LaneFollow;

    match pick_target(s, occ, th) {
        Some(t) => {
            next.current_lane = t;
            next.pause_until = now + cfg.pause_s;
            Decision::Switch { from: s, to: t }
        }
        None => Decision::Brake,
    }
}

fn pick_target(s: LaneId, occ: &LaneOccupancy, th: &Thresholds) -> Option<LaneId> {
    let l = occ.counts;
    let empty = |t: LaneId| l[t.index()] < th.theta_e && occ.prev[t.index()] < th.theta_e;
    match s {
        LaneId::Center => {
            let inner = empty(LaneId::Inner);
            let outer = empty(LaneId::Outer);
            match (inner, outer) {
                (true, true) if l[LaneId::Outer.index()] < l[LaneId::Inner.index()] => {
                    Some(LaneId::Outer)
                }
                (true, _) => Some(LaneId::Inner),
                (false, true) => Some(LaneId::Outer),
                (false, false) => None,
            }
        }
        LaneId::Inner | LaneId::Outer => {
            let far = if s == LaneId::Inner {
                LaneId::Outer
            } else {
                LaneId::Inner
            };
            if empty(LaneId::Center) {
                Some(LaneId::Center)
            } else if empty(far) && l[LaneId::Center.index()] < th.theta_o {
                Some(far)
            } else {
                None
            }
        }
        LaneId::Optimized => None,
    }
}

/// Base lane nearest to the ego; ties go to the lower lane index.
pub fn effective_lane(ego: &Vec2, lanes: &[Lane; 3]) -> LaneId {
    let mut best = LaneId::Inner;
    let mut best_d = f64::INFINITY;
    for (lane, id) in lanes.iter().zip(LaneId::BASE) {
        let d = project(lane, ego).distance;
        if d < best_d {
            best_d = d;
            best = id;
        }
    }
    best
}

/// Waypoints of `lane` starting just ahead of the ego and spanning at least
/// `horizon_length` metres of arc.
pub fn publish_trajectory(lane: &Lane, ego: &Vec2, horizon_length: f64) -> Vec<Waypoint> {
    let n = lane.len();
    let start = (project(lane, ego).index + 1) % n;
    let mut seg = vec![lane.waypoints[start]];
    let mut arc = 0.0;
    let mut i = start;
    while arc < horizon_length && seg.len() <= n {
        let j = (i + 1) % n;
        arc += (lane.waypoints[j].pos() - lane.waypoints[i].pos()).norm();
        seg.push(lane.waypoints[j]);
        i = j;
    }
    seg
}

/// Scales target speeds by `factor`, never below `floor` unless the
/// reference was already slower.
pub fn brake_reference(segment: &[Waypoint], factor: f64, floor: f64) -> Vec<Waypoint> {
    segment
        .iter()
        .map(|w| Waypoint {
            target_speed: w.target_speed.min((w.target_speed * factor).max(floor)),
            ..*w
        })
        .collect()
}
