//! Static SVG race plot: lanes and driven paths, the ego's lateral error
//! against the lane it was tracking, and the decision timeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{ClosedPolyline, Vec2};
use crate::planner::Decision;
use crate::trace::{Agent, TraceRow};
use crate::track::{Lane, LaneId};

const WIDTH: f64 = 960.0;
const MARGIN: f64 = 50.0;
const CHART_H: f64 = 220.0;
const PATH_STRIDE: usize = 5;

const LANE_COLORS: [&str; 4] = ["#9aa5b1", "#7b8794", "#9aa5b1", "#2f9e44"];
const NPC_COLOR: &str = "#1c7ed6";
const EGO_COLOR: &str = "#e03131";

/// Decision kinds drawn on the timeline, top to bottom.
const KINDS: [(&str, &str); 4] = [
    ("switch", "#f08c00"),
    ("engage", "#2f9e44"),
    ("brake", "#c92a2a"),
    ("brake_pause", "#862e9c"),
];

fn kind(d: &Decision) -> Option<usize> {
    match d {
        Decision::Stay => None,
        Decision::Switch { .. } => Some(0),
        Decision::EngageOptimized => Some(1),
        Decision::Brake => Some(2),
        Decision::BrakeDuringPause => Some(3),
    }
}

/// Signed lateral offset of each ego row from the lane it was tracking.
pub fn lateral_errors(lanes: &[Lane], rows: &[TraceRow]) -> Vec<(f64, f64)> {
    let polys: Vec<ClosedPolyline> = lanes.iter().map(Lane::polyline).collect();
    let by_id = |id: LaneId| lanes.iter().position(|l| l.id == id);
    let mut hints = vec![None; lanes.len()];
    rows.iter()
        .filter(|r| r.agent == Agent::Ego)
        .filter_map(|r| {
            let k = by_id(r.lane)?;
            let p = Vec2::new(r.x, r.y);
            let pr = match hints[k] {
                Some(h) => polys[k].project_near(&p, h, 8),
                None => polys[k].project(&p),
            };
            // A stale hint after a long gap would give a local minimum.
            let pr = if pr.distance > 5.0 { polys[k].project(&p) } else { pr };
            hints[k] = Some(pr.segment);
            Some((r.t, pr.lateral))
        })
        .collect()
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.x0 + (v - self.xmin) / (self.xmax - self.xmin) * self.w
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + self.h - (v - self.ymin) / (self.ymax - self.ymin) * self.h
    }

    fn points<'a>(&self, pts: impl Iterator<Item = (f64, f64)> + 'a) -> String {
        let mut s = String::new();
        for (x, y) in pts {
            let _ = write!(s, "{:.2},{:.2} ", self.x(x), self.y(y));
        }
        s.pop();
        s
    }

    fn border(&self, out: &mut String, title: &str) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#495057"/>"##,
            self.x0, self.y0, self.w, self.h
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="14" font-weight="bold">{title}</text>"#,
            self.x0,
            self.y0 - 8.0
        );
    }

    fn axis_labels(&self, out: &mut String, xlabel: &str, ylabel: &str) {
        let t = |out: &mut String, x: f64, y: f64, anchor: &str, s: String| {
            let _ = writeln!(
                out,
                r#"<text x="{x:.1}" y="{y:.1}" font-size="11" text-anchor="{anchor}">{s}</text>"#
            );
        };
        let bottom = self.y0 + self.h + 14.0;
        t(out, self.x0, bottom, "start", format!("{:.1}", self.xmin));
        t(out, self.x0 + self.w, bottom, "end", format!("{:.1}", self.xmax));
        t(out, self.x0 + self.w / 2.0, bottom + 14.0, "middle", xlabel.to_string());
        t(out, self.x0 - 4.0, self.y0 + 10.0, "end", format!("{:.2}", self.ymax));
        t(out, self.x0 - 4.0, self.y0 + self.h, "end", format!("{:.2}", self.ymin));
        t(out, self.x0 - 4.0, self.y0 + self.h / 2.0, "end", ylabel.to_string());
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

/// Renders the three-panel plot. Fails when the trace has no ego rows.
pub fn render_svg(lanes: &[Lane], rows: &[TraceRow]) -> Result<String> {
    let ego: Vec<&TraceRow> = rows.iter().filter(|r| r.agent == Agent::Ego).collect();
    if ego.is_empty() {
        return Err(Error::Trace("trace has no ego rows".into()));
    }
    let mut paths: BTreeMap<Agent, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        paths.entry(r.agent).or_default().push((r.x, r.y));
    }

    // Map panel, equal aspect.
    let all_xy = || {
        lanes
            .iter()
            .flat_map(|l| l.waypoints.iter().map(|w| (w.x, w.y)))
            .chain(rows.iter().map(|r| (r.x, r.y)))
    };
    let (xmin, xmax) = bounds(all_xy().map(|p| p.0));
    let (ymin, ymax) = bounds(all_xy().map(|p| p.1));
    let w = WIDTH - 2.0 * MARGIN;
    let h = w * (ymax - ymin) / (xmax - xmin);
    let map = Frame {
        x0: MARGIN,
        y0: MARGIN,
        w,
        h,
        xmin,
        xmax,
        ymin,
        ymax,
    };

    let errors = lateral_errors(lanes, rows);
    let t_end = ego.last().map(|r| r.t).unwrap_or(0.0);
    let t_start = ego[0].t;
    let (t_lo, t_hi) = if t_end > t_start { (t_start, t_end) } else { (t_start, t_start + 1.0) };
    let emax = errors.iter().map(|e| e.1.abs()).fold(0.1, f64::max);
    let err = Frame {
        x0: MARGIN,
        y0: map.y0 + map.h + 2.0 * MARGIN,
        w,
        h: CHART_H,
        xmin: t_lo,
        xmax: t_hi,
        ymin: -emax,
        ymax: emax,
    };
    let timeline = Frame {
        x0: MARGIN,
        y0: err.y0 + err.h + 2.0 * MARGIN,
        w,
        h: CHART_H,
        xmin: t_lo,
        xmax: t_hi,
        ymin: -0.5,
        ymax: 3.5,
    };
    let height = timeline.y0 + timeline.h + MARGIN;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    map.border(&mut s, "Lanes and trajectories");
    for lane in lanes {
        let pts = map.points(lane.waypoints.iter().map(|w| (w.x, w.y)));
        let dash = if lane.id == LaneId::Optimized { "" } else { r#" stroke-dasharray="4 3""# };
        let _ = writeln!(
            s,
            r#"<polygon class="lane {}" points="{pts}" fill="none" stroke="{}" stroke-width="1"{dash}/>"#,
            lane.id,
            LANE_COLORS[lane.id.index()]
        );
    }
    for (agent, xy) in &paths {
        let (color, width) = match agent {
            Agent::Ego => (EGO_COLOR, 1.6),
            Agent::Npc(_) => (NPC_COLOR, 0.8),
        };
        let pts = map.points(xy.iter().step_by(PATH_STRIDE).copied().chain(xy.last().copied()));
        let _ = writeln!(
            s,
            r#"<polyline class="path {agent}" points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>"#
        );
    }

    err.border(&mut s, "Lateral error to tracked lane");
    err.axis_labels(&mut s, "t [s]", "e [m]");
    let _ = writeln!(
        s,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ced4da"/>"##,
        err.x(t_lo),
        err.y(0.0),
        err.x(t_hi),
        err.y(0.0)
    );
    let pts = err.points(errors.iter().step_by(2).copied());
    let _ = writeln!(
        s,
        r#"<polyline class="lateral-error" points="{pts}" fill="none" stroke="{EGO_COLOR}" stroke-width="1"/>"#
    );

    timeline.border(&mut s, "Decisions and tracked lane");
    timeline.axis_labels(&mut s, "t [s]", "");
    let lane_pts = timeline.points(ego.iter().step_by(PATH_STRIDE).map(|r| (r.t, r.lane.index() as f64)));
    let _ = writeln!(
        s,
        r##"<polyline class="tracked-lane" points="{lane_pts}" fill="none" stroke="#adb5bd" stroke-width="1.2"/>"##
    );
    for (k, (name, color)) in KINDS.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{name}</text>"#,
            timeline.x0 + timeline.w + 4.0,
            timeline.y(3.0 - k as f64) + 4.0
        );
    }
    for r in &ego {
        let Some(d) = r.decision else { continue };
        let Some(k) = kind(&d) else { continue };
        let (name, color) = KINDS[k];
        let _ = writeln!(
            s,
            r#"<circle class="decision {name}" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"><title>{:.2} s {d}</title></circle>"#,
            timeline.x(r.t),
            timeline.y(3.0 - k as f64),
            r.t
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::generate_oval;

    fn ego_row(t: f64, x: f64, y: f64, lane: LaneId, decision: Option<Decision>) -> TraceRow {
        TraceRow {
            t,
            agent: Agent::Ego,
            x,
            y,
            yaw: 0.0,
            v: 30.0,
            lane,
            decision,
            counts: decision.map(|_| [0; 3]),
            accel: 0.0,
            delta_cmd: 0.0,
            cost: Some(0.0),
        }
    }

    #[test]
    fn empty_trace_is_an_error() {
        let track = generate_oval(100.0, 50.0, 15.0, 2.0).unwrap();
        let lanes = track.base_lanes(30.0).unwrap();
        assert!(render_svg(&lanes, &[]).is_err());
    }

    #[test]
    fn markers_and_errors() {
        let track = generate_oval(100.0, 50.0, 15.0, 2.0).unwrap();
        let lanes = track.base_lanes(30.0).unwrap();
        // The oval starts at (0, -50) heading +x; the left normal is +y.
        let rows = vec![
            ego_row(0.0, 0.0, -49.0, LaneId::Center, Some(Decision::Stay)),
            ego_row(0.1, 2.0, -50.5, LaneId::Center, Some(Decision::EngageOptimized)),
            ego_row(
                0.2,
                4.0,
                -50.0,
                LaneId::Inner,
                Some(Decision::Switch {
                    from: LaneId::Center,
                    to: LaneId::Inner,
                }),
            ),
        ];
        let e = lateral_errors(&lanes, &rows);
        assert!((e[0].1 - 1.0).abs() < 1e-9);
        assert!((e[1].1 + 0.5).abs() < 1e-9);
        assert!((e[2].1 + track.lane_spacing()).abs() < 1e-9);

        let svg = render_svg(&lanes, &rows).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches(r#"class="decision switch""#).count(), 1);
        assert_eq!(svg.matches(r#"class="decision engage""#).count(), 1);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(svg.matches(r#"class="lane "#).count(), 3);
    }
}
