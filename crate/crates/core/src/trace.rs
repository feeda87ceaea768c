//! Per-tick race trace: CSV serialization and invariant replay.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::planner::{Decision, Thresholds};
use crate::track::LaneId;

pub const HEADER: [&str; 14] = [
    "t", "agent", "x", "y", "yaw", "v", "lane", "decision", "l0", "l1", "l2", "accel", "delta_cmd", "cost",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Agent {
    Ego,
    Npc(usize),
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Agent::Ego => f.write_str("ego"),
            Agent::Npc(i) => write!(f, "npc{i}"),
        }
    }
}

impl FromStr for Agent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ego" {
            return Ok(Agent::Ego);
        }
        s.strip_prefix("npc")
            .and_then(|i| i.parse().ok())
            .map(Agent::Npc)
            .ok_or_else(|| Error::Trace(format!("unknown agent '{s}'")))
    }
}

/// One agent at one physics tick. Decision and lane counts are only set on
/// the ego's rows at LiDAR ticks; cost only on the ego's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub agent: Agent,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub lane: LaneId,
    pub decision: Option<Decision>,
    pub counts: Option<[u32; 3]>,
    pub accel: f64,
    pub delta_cmd: f64,
    pub cost: Option<f64>,
}

pub fn write_trace<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HEADER)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        let c = |k: usize| opt(r.counts.map(|c| c[k].to_string()));
        out.write_record([
            r.t.to_string(),
            r.agent.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.yaw.to_string(),
            r.v.to_string(),
            r.lane.index().to_string(),
            opt(r.decision.map(|d| d.to_string())),
            c(0),
            c(1),
            c(2),
            r.accel.to_string(),
            r.delta_cmd.to_string(),
            opt(r.cost.map(|c| c.to_string())),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(r: R) -> Result<Vec<TraceRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let missing: Vec<&str> = HEADER
        .iter()
        .copied()
        .filter(|h| !header.iter().any(|c| c == *h))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Trace(format!("missing columns: {}", missing.join(", "))));
    }
    let col = |name: &str| header.iter().position(|c| c == name).unwrap();
    let idx: Vec<usize> = HEADER.iter().map(|h| col(h)).collect();

    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Trace(format!("row {}: bad {what}", line + 2));
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let num = |k: usize| field(k).parse::<f64>().map_err(|_| bad(HEADER[k]));
        let count = |k: usize| field(k).parse::<u32>().map_err(|_| bad(HEADER[k]));
        let counts = if field(8).is_empty() {
            None
        } else {
            Some([count(8)?, count(9)?, count(10)?])
        };
        rows.push(TraceRow {
            t: num(0)?,
            agent: field(1).parse()?,
            x: num(2)?,
            y: num(3)?,
            yaw: num(4)?,
            v: num(5)?,
            lane: field(6)
                .parse::<usize>()
                .ok()
                .and_then(LaneId::from_index)
                .ok_or_else(|| bad("lane"))?,
            decision: match field(7) {
                "" => None,
                s => Some(s.parse()?),
            },
            counts,
            accel: num(11)?,
            delta_cmd: num(12)?,
            cost: match field(13) {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("cost"))?),
            },
        });
    }
    Ok(rows)
}

/// Replays the ego's decision stream and reports every violated planner
/// invariant: the pause between lane changes, the switch preconditions on
/// the logged occupancy, and the clear streak before an engagement.
pub fn verify(rows: &[TraceRow], th: &Thresholds, pause_s: f64, engage_streak: u32) -> Vec<String> {
    let mut issues = Vec::new();
    let mut prev = [0u32; 3];
    let mut last_change = f64::NEG_INFINITY;
    let mut streak = 0u32;
    for r in rows.iter().filter(|r| r.agent == Agent::Ego) {
        let Some(d) = r.decision else { continue };
        let Some(l) = r.counts else {
            issues.push(format!("t={}: decision without lane counts", r.t));
            continue;
        };
        streak = if l.iter().all(|c| *c < th.theta_e) { streak + 1 } else { 0 };
        if d.is_lane_change() {
            if r.t - last_change < pause_s - 1e-9 {
                issues.push(format!(
                    "t={}: {d} only {:.3} s after the previous lane change",
                    r.t,
                    r.t - last_change
                ));
            }
            last_change = r.t;
        }
        match d {
            Decision::Switch { from, to } => {
                let (s, t) = (from.index(), to.index());
                if l[s] <= th.theta_o {
                    issues.push(format!("t={}: {d} with l_s = {} ≤ θo", r.t, l[s]));
                }
                if l[t] >= th.theta_e || prev[t] >= th.theta_e {
                    issues.push(format!("t={}: {d} into a lane that is not empty", r.t));
                }
                if s.abs_diff(t) == 2 && l[1] >= th.theta_o {
                    issues.push(format!("t={}: {d} crosses an occupied center lane", r.t));
                }
            }
            Decision::EngageOptimized if streak < engage_streak => {
                issues.push(format!("t={}: engage after only {streak} clear scans", r.t));
            }
            _ => {}
        }
        prev = l;
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, d: Option<Decision>, counts: [u32; 3]) -> TraceRow {
        TraceRow {
            t,
            agent: Agent::Ego,
            x: 1.5,
            y: -0.1,
            yaw: 0.25,
            v: 31.0,
            lane: LaneId::Outer,
            decision: d,
            counts: d.map(|_| counts),
            accel: 0.1,
            delta_cmd: -0.01,
            cost: Some(1e-3),
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut rows = vec![row(0.1, Some(Decision::Stay), [0, 4, 12]), row(0.11, None, [0; 3])];
        rows.push(TraceRow {
            agent: Agent::Npc(3),
            cost: None,
            ..rows[1].clone()
        });
        let mut buf = Vec::new();
        write_trace(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,agent,x,y,yaw,v,lane,decision,l0,l1,l2,accel,delta_cmd,cost\n"));
        assert_eq!(read_trace(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn missing_columns_are_reported() {
        let err = read_trace("t,agent,x\n0,ego,1\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("decision"));
    }

    #[test]
    fn verify_flags_violations() {
        let th = Thresholds::default();
        let sw = |from, to| Some(Decision::Switch { from, to });
        let good = vec![
            row(0.1, Some(Decision::Stay), [0, 0, 12]),
            row(0.2, sw(LaneId::Outer, LaneId::Center), [0, 0, 12]),
            row(10.2, sw(LaneId::Center, LaneId::Inner), [0, 12, 0]),
        ];
        assert!(verify(&good, &th, 10.0, 5).is_empty());

        let early = vec![
            row(0.2, sw(LaneId::Outer, LaneId::Center), [0, 0, 12]),
            row(5.0, sw(LaneId::Center, LaneId::Inner), [0, 12, 0]),
        ];
        assert_eq!(verify(&early, &th, 10.0, 5).len(), 1);

        let crossing = vec![row(0.2, sw(LaneId::Outer, LaneId::Inner), [0, 9, 12])];
        assert_eq!(verify(&crossing, &th, 10.0, 5).len(), 1);

        let stale = vec![
            row(0.1, Some(Decision::Stay), [0, 5, 12]),
            row(0.2, sw(LaneId::Outer, LaneId::Center), [0, 0, 12]),
        ];
        assert_eq!(verify(&stale, &th, 10.0, 5).len(), 1);

        let eager: Vec<TraceRow> = (1..=3)
            .map(|k| row(0.1 * k as f64, Some(if k == 3 { Decision::EngageOptimized } else { Decision::Stay }), [0; 3]))
            .collect();
        assert_eq!(verify(&eager, &th, 10.0, 5).len(), 1);
    }
}
