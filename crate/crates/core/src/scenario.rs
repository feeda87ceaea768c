//! Race scenario: track source, opponents, ego start, rates and every
//! tunable of the stack, loaded from a single JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lidar::LidarConfig;
use crate::mpc::MpcConfig;
use crate::perception::CropConfig;
use crate::planner::{PlannerConfig, Thresholds};
use crate::raceline::SpeedLimits;
use crate::track::{generate_oval, load_centerline, LaneId, TrackModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackSpec {
    /// CSV centerline (`x_m,y_m,w_tr_right_m,w_tr_left_m`). When absent a
    /// stadium oval is generated from the remaining fields.
    pub centerline: Option<PathBuf>,
    pub straight_length: f64,
    pub turn_radius: f64,
    pub width: f64,
    pub spacing: f64,
}

impl Default for TrackSpec {
    fn default() -> Self {
        Self {
            centerline: None,
            straight_length: 300.0,
            turn_radius: 100.0,
            width: 15.0,
            spacing: 2.0,
        }
    }
}

impl TrackSpec {
    /// Relative centerline paths resolve against `base`.
    pub fn build(&self, base: Option<&Path>) -> Result<TrackModel> {
        match &self.centerline {
            Some(p) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                load_centerline(path, self.spacing)
            }
            None => generate_oval(self.straight_length, self.turn_radius, self.width, self.spacing),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RacelineSpec {
    /// Clearance kept between the line and either track edge.
    pub car_half_width: f64,
    pub iterations: usize,
}

impl Default for RacelineSpec {
    fn default() -> Self {
        Self {
            car_half_width: 0.95,
            iterations: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneChange {
    pub time: f64,
    pub lane: LaneId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpcSpec {
    pub lane: LaneId,
    pub target_speed: f64,
    /// Centerline arc of the start position.
    pub start_arc: f64,
    #[serde(default)]
    pub lane_changes: Vec<LaneChange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoSpec {
    /// `optimized` starts directly on the raceline.
    pub lane: LaneId,
    pub start_arc: f64,
    /// Initial speed; the start lane's profile speed when absent.
    pub start_speed: Option<f64>,
}

impl Default for EgoSpec {
    fn default() -> Self {
        Self {
            lane: LaneId::Outer,
            start_arc: 0.0,
            start_speed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rates {
    pub physics: f64,
    pub control: f64,
    pub lidar: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            physics: 100.0,
            control: 50.0,
            lidar: 10.0,
        }
    }
}

impl Rates {
    /// Physics ticks per control and per LiDAR period.
    pub fn divisors(&self) -> Result<(u64, u64)> {
        let div = |slow: f64| -> Option<u64> {
            let r = self.physics / slow;
            let n = r.round();
            ((r - n).abs() < 1e-9 && n >= 1.0).then_some(n as u64)
        };
        if !(self.physics >= self.control && self.control >= self.lidar && self.lidar > 0.0) {
            return Err(Error::Config("rates need physics ≥ control ≥ lidar > 0".into()));
        }
        match (div(self.control), div(self.lidar)) {
            (Some(c), Some(l)) => Ok((c, l)),
            _ => Err(Error::Config(
                "control and lidar rates must divide the physics rate".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpcControl {
    pub lookahead_min: f64,
    pub lookahead_time: f64,
    pub speed_gain: f64,
}

impl Default for NpcControl {
    fn default() -> Self {
        Self {
            lookahead_min: 5.0,
            lookahead_time: 0.6,
            speed_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub track: TrackSpec,
    pub raceline: RacelineSpec,
    pub speed_limits: SpeedLimits,
    pub npcs: Vec<NpcSpec>,
    pub npc_control: NpcControl,
    pub ego: EgoSpec,
    pub rates: Rates,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub planner: PlannerConfig,
    pub perception: CropConfig,
    pub mpc: MpcConfig,
    pub lidar: LidarConfig,
    pub max_time: f64,
    /// Delay planner output by one control period.
    pub inject_latency: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            track: TrackSpec::default(),
            raceline: RacelineSpec::default(),
            speed_limits: SpeedLimits::default(),
            npcs: default_npcs(),
            npc_control: NpcControl::default(),
            ego: EgoSpec::default(),
            rates: Rates::default(),
            seed: 42,
            thresholds: Thresholds::default(),
            planner: PlannerConfig::default(),
            perception: CropConfig::default(),
            mpc: MpcConfig::default(),
            lidar: LidarConfig::default(),
            max_time: 120.0,
            inject_latency: false,
        }
    }
}

/// Five opponents 40 m apart, slowest in front, alternating between the
/// side lanes with the last one in the center.
pub fn default_npcs() -> Vec<NpcSpec> {
    let lanes = [
        LaneId::Outer,
        LaneId::Inner,
        LaneId::Outer,
        LaneId::Inner,
        LaneId::Center,
    ];
    (0..5)
        .map(|i| NpcSpec {
            lane: lanes[i],
            target_speed: 36.0 - 1.5 * i as f64,
            start_arc: 30.0 + 40.0 * i as f64,
            lane_changes: vec![],
        })
        .collect()
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that does not need the track geometry.
    pub fn validate(&self) -> Result<()> {
        self.rates.divisors()?;
        self.thresholds.validate()?;
        self.planner.validate()?;
        self.perception.validate()?;
        self.mpc.validate()?;
        self.lidar.validate()?;
        self.speed_limits.validate()?;
        if !(self.max_time > 0.0) {
            return Err(Error::Config("max_time must be positive".into()));
        }
        if !(self.raceline.car_half_width >= 0.0) || self.raceline.iterations == 0 {
            return Err(Error::Config("invalid raceline settings".into()));
        }
        if let Some(v) = self.ego.start_speed {
            if !(v >= 0.0) {
                return Err(Error::Config("ego start_speed must be non-negative".into()));
            }
        }
        for (i, npc) in self.npcs.iter().enumerate() {
            let bad = |m: &str| Err(Error::Config(format!("npc {i}: {m}")));
            if npc.lane == LaneId::Optimized
                || npc.lane_changes.iter().any(|c| c.lane == LaneId::Optimized)
            {
                return bad("opponents follow base lanes only");
            }
            if !(npc.target_speed >= 0.0) || !npc.start_arc.is_finite() {
                return bad("target_speed must be non-negative and start_arc finite");
            }
            if npc.lane_changes.iter().any(|c| !(c.time >= 0.0)) {
                return bad("lane change times must be non-negative");
            }
        }
        Ok(())
    }

    /// Each opponent's arc lead over the ego along a track of the given
    /// perimeter. Fails unless every opponent starts strictly ahead.
    pub fn npc_leads(&self, perimeter: f64) -> Result<Vec<f64>> {
        self.npcs
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let lead = (n.start_arc - self.ego.start_arc).rem_euclid(perimeter);
                if lead > 0.0 {
                    Ok(lead)
                } else {
                    Err(Error::Config(format!("npc {i} must start ahead of the ego")))
                }
            })
            .collect()
    }
}
