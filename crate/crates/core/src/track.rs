//! Closed race track, lane construction and the projection utilities used
//! by every other stage of the stack.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cross, wrap_angle, ClosedPolyline, Segment, Vec2};

pub const MIN_TRACK_SAMPLES: usize = 64;

/// Sub-samples per segment when densifying a polyline for resampling.
const DENSIFY: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneId {
    Inner = 0,
    Center = 1,
    Outer = 2,
    Optimized = 3,
}

impl LaneId {
    pub const BASE: [LaneId; 3] = [LaneId::Inner, LaneId::Center, LaneId::Outer];
    pub const ALL: [LaneId; 4] = [LaneId::Inner, LaneId::Center, LaneId::Outer, LaneId::Optimized];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<LaneId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LaneId::Inner => "inner",
            LaneId::Center => "center",
            LaneId::Outer => "outer",
            LaneId::Optimized => "optimized",
        }
    }
}

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub curvature: f64,
    pub target_speed: f64,
}

impl Waypoint {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// A drivable closed waypoint loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: LaneId,
    pub waypoints: Vec<Waypoint>,
}

/// Nearest-waypoint projection result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneProjection {
    pub index: usize,
    pub distance: f64,
    /// Positive to the left of the waypoint heading.
    pub lateral: f64,
}

impl Lane {
    /// Builds a lane from raw loop points: resampled to `spacing`, headings and
    /// curvatures recomputed, every target speed set to `speed`.
    pub fn from_points(id: LaneId, points: &[Vec2], spacing: f64, speed: f64) -> Result<Lane> {
        let (pts, _) = resample_closed(points, &[], spacing)?;
        Ok(Self::from_resampled(id, &pts, speed))
    }

    /// Builds a lane from points that are already evenly spaced.
    pub fn from_resampled(id: LaneId, pts: &[Vec2], speed: f64) -> Lane {
        let headings = central_headings(pts);
        let kappa = three_point_curvature(pts);
        let waypoints = pts
            .iter()
            .zip(headings)
            .zip(kappa)
            .map(|((p, heading), curvature)| Waypoint {
                x: p.x,
                y: p.y,
                heading,
                curvature,
                target_speed: speed,
            })
            .collect();
        Lane { id, waypoints }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.waypoints.iter().map(Waypoint::pos).collect()
    }

    pub fn polyline(&self) -> ClosedPolyline {
        ClosedPolyline::new(self.positions())
    }

    pub fn length(&self) -> f64 {
        let n = self.len();
        (0..n)
            .map(|i| (self.waypoints[(i + 1) % n].pos() - self.waypoints[i].pos()).norm())
            .sum()
    }

    pub fn mean_spacing(&self) -> f64 {
        self.length() / self.len() as f64
    }

    /// Lap time at the lane's target speeds, integrating ds over the mean
    /// speed of each segment.
    pub fn ideal_time(&self) -> f64 {
        let n = self.len();
        (0..n)
            .map(|i| {
                let a = &self.waypoints[i];
                let b = &self.waypoints[(i + 1) % n];
                (b.pos() - a.pos()).norm() / (0.5 * (a.target_speed + b.target_speed))
            })
            .sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x_m", "y_m", "heading_rad", "kappa_1pm", "v_mps"])?;
        for wp in &self.waypoints {
            wr.write_record([
                wp.x.to_string(),
                wp.y.to_string(),
                wp.heading.to_string(),
                wp.curvature.to_string(),
                wp.target_speed.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(id: LaneId, r: R) -> Result<Lane> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let header = rd.headers()?.clone();
        let expected = ["x_m", "y_m", "heading_rad", "kappa_1pm", "v_mps"];
        if header.iter().map(str::trim).ne(expected) {
            return Err(Error::Trace(format!(
                "lane header must be {}",
                expected.join(",")
            )));
        }
        let mut waypoints = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Trace(format!("bad lane value: {e}")))?;
            waypoints.push(Waypoint {
                x: v[0],
                y: v[1],
                heading: v[2],
                curvature: v[3],
                target_speed: v[4],
            });
        }
        Ok(Lane { id, waypoints })
    }
}

/// Closed centerline with per-sample half widths.
#[derive(Debug, Clone)]
pub struct TrackModel {
    pub centerline: Vec<Vec2>,
    pub half_width_left: Vec<f64>,
    pub half_width_right: Vec<f64>,
    pub spacing: f64,
}

impl TrackModel {
    pub fn new(
        centerline: Vec<Vec2>,
        half_width_left: Vec<f64>,
        half_width_right: Vec<f64>,
        spacing: f64,
    ) -> Result<Self> {
        let n = centerline.len();
        if n < MIN_TRACK_SAMPLES {
            return Err(Error::TooFewPoints {
                found: n,
                needed: MIN_TRACK_SAMPLES,
            });
        }
        if half_width_left.len() != n || half_width_right.len() != n {
            return Err(Error::Geometry("width arrays do not match centerline".into()));
        }
        if half_width_left
            .iter()
            .chain(&half_width_right)
            .any(|w| !(*w > 0.0))
        {
            return Err(Error::Geometry("half widths must be positive".into()));
        }
        if !(spacing > 0.0) {
            return Err(Error::Geometry("spacing must be positive".into()));
        }
        Ok(Self {
            centerline,
            half_width_left,
            half_width_right,
            spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.centerline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centerline.is_empty()
    }

    pub fn polyline(&self) -> ClosedPolyline {
        ClosedPolyline::new(self.centerline.clone())
    }

    pub fn perimeter(&self) -> f64 {
        self.polyline().perimeter()
    }

    /// Left unit normals at every centerline sample.
    pub fn normals(&self) -> Vec<Vec2> {
        central_headings(&self.centerline)
            .into_iter()
            .map(crate::geometry::left_normal)
            .collect()
    }

    /// Smallest half width on either side.
    pub fn min_half_width(&self) -> f64 {
        self.half_width_left
            .iter()
            .chain(&self.half_width_right)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Left and right boundary walls as closed segment loops.
    pub fn walls(&self) -> Vec<Segment> {
        let normals = self.normals();
        let n = self.len();
        let left: Vec<Vec2> = (0..n)
            .map(|i| self.centerline[i] + normals[i] * self.half_width_left[i])
            .collect();
        let right: Vec<Vec2> = (0..n)
            .map(|i| self.centerline[i] - normals[i] * self.half_width_right[i])
            .collect();
        let mut segs = Vec::with_capacity(2 * n);
        for side in [&left, &right] {
            for i in 0..n {
                segs.push(Segment::new(side[i], side[(i + 1) % n]));
            }
        }
        segs
    }

    /// The three base lanes at offsets {+w/3, 0, −w/3}, w the smallest half
    /// width; Inner is on the left, which is the turn side of a
    /// counter-clockwise track.
    pub fn base_lanes(&self, speed: f64) -> Result<[Lane; 3]> {
        let d = self.lane_spacing();
        Ok([
            with_speed(lane_offset(self, d, self.spacing)?, LaneId::Inner, speed),
            with_speed(lane_offset(self, 0.0, self.spacing)?, LaneId::Center, speed),
            with_speed(lane_offset(self, -d, self.spacing)?, LaneId::Outer, speed),
        ])
    }

    /// Lateral distance between adjacent base lanes.
    pub fn lane_spacing(&self) -> f64 {
        self.min_half_width() / 3.0
    }
}

fn with_speed(mut lane: Lane, id: LaneId, speed: f64) -> Lane {
    lane.id = id;
    for wp in &mut lane.waypoints {
        wp.target_speed = speed;
    }
    lane
}

/// Stadium oval: two straights joined by semicircular turns, driven
/// counter-clockwise, starting at the middle of the lower straight.
pub fn generate_oval(
    straight_length: f64,
    turn_radius: f64,
    track_width: f64,
    spacing: f64,
) -> Result<TrackModel> {
    if !(straight_length >= 0.0) || !(turn_radius > 0.0) || !(track_width > 0.0) || !(spacing > 0.0)
    {
        return Err(Error::Geometry(
            "oval dimensions must be positive (straight may be zero)".into(),
        ));
    }
    if spacing >= turn_radius / 4.0 {
        return Err(Error::Geometry(format!(
            "spacing {spacing} m must be below a quarter of the turn radius {turn_radius} m"
        )));
    }
    if track_width / 2.0 >= turn_radius {
        return Err(Error::Geometry("track wider than the turn radius".into()));
    }
    let s = straight_length;
    let r = turn_radius;
    let arc = PI * r;
    let perimeter = 2.0 * s + 2.0 * arc;
    let n = (perimeter / spacing).round() as usize;
    if n < MIN_TRACK_SAMPLES {
        return Err(Error::TooFewPoints {
            found: n,
            needed: MIN_TRACK_SAMPLES,
        });
    }
    let step = perimeter / n as f64;
    let half = s / 2.0;
    let point = |d: f64| -> Vec2 {
        // Piecewise: half straight, right turn, top straight, left turn, half straight.
        if d < half {
            return Vec2::new(d, -r);
        }
        let d = d - half;
        if d < arc {
            let th = -PI / 2.0 + d / r;
            return Vec2::new(half + r * th.cos(), r * th.sin());
        }
        let d = d - arc;
        if d < s {
            return Vec2::new(half - d, r);
        }
        let d = d - s;
        if d < arc {
            let th = PI / 2.0 + d / r;
            return Vec2::new(-half + r * th.cos(), r * th.sin());
        }
        let d = d - arc;
        Vec2::new(-half + d, -r)
    };
    let centerline: Vec<Vec2> = (0..n).map(|i| point(i as f64 * step)).collect();
    let w = vec![track_width / 2.0; n];
    TrackModel::new(centerline, w.clone(), w, spacing)
}

/// Reads a `x_m,y_m,w_tr_right_m,w_tr_left_m` centerline CSV and resamples
/// it to `spacing`.
pub fn load_centerline(path: impl AsRef<Path>, spacing: f64) -> Result<TrackModel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    parse_centerline(BufReader::new(file), path, spacing)
}

pub fn parse_centerline<R: BufRead>(reader: R, path: &Path, spacing: f64) -> Result<TrackModel> {
    let fmt_err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut header_seen = false;
    let mut pts = Vec::new();
    let mut widths = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = t.split(',').map(str::trim).collect();
        if !header_seen {
            if cols != ["x_m", "y_m", "w_tr_right_m", "w_tr_left_m"] {
                return Err(fmt_err(
                    lineno,
                    "expected header x_m,y_m,w_tr_right_m,w_tr_left_m".into(),
                ));
            }
            header_seen = true;
            continue;
        }
        if cols.len() != 4 {
            return Err(fmt_err(lineno, format!("expected 4 columns, got {}", cols.len())));
        }
        let mut v = [0.0; 4];
        for (k, c) in cols.iter().enumerate() {
            v[k] = c
                .parse::<f64>()
                .map_err(|e| fmt_err(lineno, format!("column {}: {e}", k + 1)))?;
            if !v[k].is_finite() {
                return Err(fmt_err(lineno, format!("column {} is not finite", k + 1)));
            }
        }
        pts.push(Vec2::new(v[0], v[1]));
        // Stored as [left, right].
        widths.push([v[3], v[2]]);
    }
    if !header_seen {
        return Err(fmt_err(1, "missing header".into()));
    }
    if pts.len() < MIN_TRACK_SAMPLES {
        return Err(Error::TooFewPoints {
            found: pts.len(),
            needed: MIN_TRACK_SAMPLES,
        });
    }
    if !(spacing > 0.0) {
        return Err(Error::Geometry("spacing must be positive".into()));
    }
    let gap = (pts[pts.len() - 1] - pts[0]).norm();
    if gap > 10.0 * spacing {
        return Err(Error::OpenLoop {
            gap,
            limit: 10.0 * spacing,
        });
    }
    // A repeated first point closes the loop explicitly; drop it.
    if gap < 1e-9 {
        pts.pop();
        widths.pop();
    }
    let scalars: Vec<Vec<f64>> = vec![
        widths.iter().map(|w| w[0]).collect(),
        widths.iter().map(|w| w[1]).collect(),
    ];
    let (centerline, mut out) = resample_closed(&pts, &scalars, spacing)?;
    let right = out.pop().unwrap_or_default();
    let left = out.pop().unwrap_or_default();
    TrackModel::new(centerline, left, right, spacing)
}

pub fn write_centerline<W: Write>(track: &TrackModel, mut w: W) -> Result<()> {
    writeln!(w, "x_m,y_m,w_tr_right_m,w_tr_left_m")?;
    for i in 0..track.len() {
        let p = track.centerline[i];
        writeln!(
            w,
            "{},{},{},{}",
            p.x, p.y, track.half_width_right[i], track.half_width_left[i]
        )?;
    }
    Ok(())
}

/// Displaces every centerline sample along its left normal by `offset`
/// (positive = left) and resamples the result into a lane.
pub fn lane_offset(track: &TrackModel, offset: f64, spacing: f64) -> Result<Lane> {
    let widths = if offset >= 0.0 {
        &track.half_width_left
    } else {
        &track.half_width_right
    };
    let available = widths.iter().copied().fold(f64::INFINITY, f64::min);
    if !(offset.abs() < available) {
        return Err(Error::OffsetOutOfBounds { offset, available });
    }
    let normals = track.normals();
    let pts: Vec<Vec2> = track
        .centerline
        .iter()
        .zip(&normals)
        .map(|(c, n)| c + n * offset)
        .collect();
    let speed = crate::raceline::SpeedLimits::default().v_cap;
    Lane::from_points(LaneId::Center, &pts, spacing, speed)
}

/// Nearest waypoint to `point`; ties go to the lowest index.
pub fn project(lane: &Lane, point: &Vec2) -> LaneProjection {
    let mut best = 0;
    let mut best_d2 = f64::INFINITY;
    for (i, wp) in lane.waypoints.iter().enumerate() {
        let d2 = (wp.pos() - point).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    let wp = &lane.waypoints[best];
    let rel = point - wp.pos();
    let dir = crate::geometry::heading_vec(wp.heading);
    LaneProjection {
        index: best,
        distance: best_d2.sqrt(),
        lateral: cross(&dir, &rel),
    }
}

/// Signed curvature at every waypoint from the circle through each cyclic
/// triple of neighbors; positive for left turns.
pub fn curvature_profile(lane: &Lane) -> Result<Vec<f64>> {
    if lane.len() < 3 {
        return Err(Error::TooFewPoints {
            found: lane.len(),
            needed: 3,
        });
    }
    Ok(three_point_curvature(&lane.positions()))
}

pub fn circumscribed_curvature(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    let ab = b - a;
    let bc = c - b;
    let ac = c - a;
    let denom = ab.norm() * bc.norm() * ac.norm();
    if denom < 1e-300 {
        return 0.0;
    }
    2.0 * cross(&ab, &bc) / denom
}

pub fn three_point_curvature(pts: &[Vec2]) -> Vec<f64> {
    let n = pts.len();
    (0..n)
        .map(|i| circumscribed_curvature(&pts[(i + n - 1) % n], &pts[i], &pts[(i + 1) % n]))
        .collect()
}

/// Heading at each sample from the central difference of its neighbors.
pub fn central_headings(pts: &[Vec2]) -> Vec<f64> {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let d = pts[(i + 1) % n] - pts[(i + n - 1) % n];
            d.y.atan2(d.x)
        })
        .collect()
}

fn catmull_rom(p0: &Vec2, p1: &Vec2, p2: &Vec2, p3: &Vec2, t: f64) -> Vec2 {
    let t2 = t * t;
    let t3 = t2 * t;
    (p1 * 2.0 + (p2 - p0) * t + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2
        + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * t3)
        * 0.5
}

/// Resamples a closed loop to even arc-length spacing. The loop is first
/// densified with a Catmull-Rom spline so resampled points stay on a smooth
/// curve; `scalars` are per-point channels interpolated linearly.
pub fn resample_closed(
    pts: &[Vec2],
    scalars: &[Vec<f64>],
    spacing: f64,
) -> Result<(Vec<Vec2>, Vec<Vec<f64>>)> {
    let n = pts.len();
    if n < 3 {
        return Err(Error::TooFewPoints { found: n, needed: 3 });
    }
    if !(spacing > 0.0) {
        return Err(Error::Geometry("spacing must be positive".into()));
    }
    let mut dense = Vec::with_capacity(n * DENSIFY + 1);
    let mut dense_s: Vec<Vec<f64>> = vec![Vec::with_capacity(n * DENSIFY + 1); scalars.len()];
    for i in 0..n {
        let p0 = &pts[(i + n - 1) % n];
        let p1 = &pts[i];
        let p2 = &pts[(i + 1) % n];
        let p3 = &pts[(i + 2) % n];
        for k in 0..DENSIFY {
            let t = k as f64 / DENSIFY as f64;
            dense.push(catmull_rom(p0, p1, p2, p3, t));
            for (ch, out) in scalars.iter().zip(dense_s.iter_mut()) {
                out.push(ch[i] + (ch[(i + 1) % n] - ch[i]) * t);
            }
        }
    }
    // Close the loop explicitly.
    dense.push(dense[0]);
    for out in dense_s.iter_mut() {
        out.push(out[0]);
    }
    let mut cum = Vec::with_capacity(dense.len());
    cum.push(0.0);
    for w in dense.windows(2) {
        let last = *cum.last().unwrap_or(&0.0);
        cum.push(last + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap_or(&0.0);
    let m = (total / spacing).round() as usize;
    if m < 3 {
        return Err(Error::TooFewPoints { found: m, needed: 3 });
    }
    let step = total / m as f64;
    let mut out = Vec::with_capacity(m);
    let mut out_s: Vec<Vec<f64>> = vec![Vec::with_capacity(m); scalars.len()];
    let mut j = 0;
    for k in 0..m {
        let s = k as f64 * step;
        while j + 1 < cum.len() - 1 && cum[j + 1] <= s {
            j += 1;
        }
        let seg = cum[j + 1] - cum[j];
        let t = if seg > 0.0 { (s - cum[j]) / seg } else { 0.0 };
        out.push(dense[j] + (dense[j + 1] - dense[j]) * t);
        for (ch, o) in dense_s.iter().zip(out_s.iter_mut()) {
            o.push(ch[j] + (ch[j + 1] - ch[j]) * t);
        }
    }
    Ok((out, out_s))
}

/// Smallest angular difference between consecutive headings, for checks.
pub fn heading_error(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}
