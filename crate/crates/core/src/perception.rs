//! Lane-occupancy perception: crop the scan, assign each return to the lane
//! whose sparse centerline is nearest, and count returns per lane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::lidar::PointCloud;
use crate::track::{Lane, LaneId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub x_min: f64,
    pub x_max: f64,
    /// Returns farther than this from every lane are discarded as walls.
    pub lane_reject_halfwidth: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            x_min: -10.0,
            x_max: 100.0,
            // Half of the 2.5 m lane spacing on the default track.
            lane_reject_halfwidth: 1.25,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max) {
            return Err(Error::Config("crop x_min must be below x_max".into()));
        }
        if !(self.lane_reject_halfwidth > 0.0) {
            return Err(Error::Config("lane_reject_halfwidth must be positive".into()));
        }
        Ok(())
    }
}

/// A decimated closed lane centerline. Segment `i` runs from vertex `i` to
/// vertex `i + 1` and may bulge sideways by a parabola whose offset at the
/// segment midpoint is `bulge[i]` (positive to the left), which restores the
/// curvature that decimation removes.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLane {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub bulge: Vec<f64>,
    dx: Vec<f64>,
    dy: Vec<f64>,
    len: Vec<f64>,
    inv_len: Vec<f64>,
    /// Bounding boxes of consecutive runs of `CHUNK` segments, bulge
    /// included: `[x_min, x_max, y_min, y_max]`.
    boxes: Vec<[f64; 4]>,
}

const CHUNK: usize = 8;

impl SparseLane {
    /// Closed polyline through the given vertices.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        Self::with_bulge(xs, ys, vec![0.0; n])
    }

    pub fn with_bulge(xs: Vec<f64>, ys: Vec<f64>, bulge: Vec<f64>) -> Self {
        let n = xs.len();
        assert!(ys.len() == n && bulge.len() == n, "sparse lane arrays differ in length");
        let mut dx = Vec::with_capacity(n);
        let mut dy = Vec::with_capacity(n);
        let mut len = Vec::with_capacity(n);
        let mut inv_len = Vec::with_capacity(n);
        for i in 0..n {
            let j = (i + 1) % n;
            let (ex, ey) = (xs[j] - xs[i], ys[j] - ys[i]);
            let l = (ex * ex + ey * ey).sqrt();
            dx.push(ex);
            dy.push(ey);
            len.push(l);
            inv_len.push(if l > 0.0 { 1.0 / l } else { 0.0 });
        }
        let boxes = (0..n)
            .step_by(CHUNK)
            .map(|start| {
                let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
                for i in start..(start + CHUNK).min(n) {
                    let h = bulge[i].abs();
                    for (x, y) in [(xs[i], ys[i]), (xs[i] + dx[i], ys[i] + dy[i])] {
                        b = [b[0].min(x - h), b[1].max(x + h), b[2].min(y - h), b[3].max(y + h)];
                    }
                }
                b
            })
            .collect();
        Self {
            xs,
            ys,
            bulge,
            dx,
            dy,
            len,
            inv_len,
            boxes,
        }
    }

    /// Squared distance to segment `i`: overshoot past the nearer end along
    /// the chord, plus lateral offset from the bulged curve.
    #[inline]
    fn seg_dist2(&self, i: usize, px: f64, py: f64) -> f64 {
        let ax = px - self.xs[i];
        let ay = py - self.ys[i];
        let inv = self.inv_len[i];
        let s = (ax * self.dx[i] + ay * self.dy[i]) * inv;
        let sc = s.clamp(0.0, self.len[i]);
        let t = sc * inv;
        let lat = (self.dx[i] * ay - self.dy[i] * ax) * inv - 4.0 * self.bulge[i] * t * (1.0 - t);
        let along = s - sc;
        along * along + lat * lat
    }

    /// Like [`SparseLane::min_dist2`] but only exact when the answer is at
    /// most `cap2`; larger distances may come back as any value above
    /// `cap2`. Segment chunks whose bounding box lies beyond the running
    /// minimum are skipped.
    pub fn min_dist2_within(&self, px: f64, py: f64, cap2: f64) -> f64 {
        let n = self.xs.len();
        let mut best = f64::INFINITY;
        for (c, b) in self.boxes.iter().enumerate() {
            let gx = (b[0] - px).max(px - b[1]).max(0.0);
            let gy = (b[2] - py).max(py - b[3]).max(0.0);
            if gx * gx + gy * gy > cap2.min(best) {
                continue;
            }
            for i in c * CHUNK..(c * CHUNK + CHUNK).min(n) {
                let d = self.seg_dist2(i, px, py);
                if d < best {
                    best = d;
                }
            }
        }
        best
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Squared distance from (px, py) to the nearest point of the polyline.
    #[inline]
    pub fn min_dist2(&self, px: f64, py: f64) -> f64 {
        // Four independent accumulators keep the loop pipelined.
        let mut acc = [f64::INFINITY; 4];
        let n = self.xs.len();
        let body = n - n % 4;
        let seg = |i: usize| self.seg_dist2(i, px, py);
        let mut i = 0;
        while i < body {
            for (k, a) in acc.iter_mut().enumerate() {
                let d = seg(i + k);
                *a = if d < *a { d } else { *a };
            }
            i += 4;
        }
        for j in body..n {
            let d = seg(j);
            acc[0] = if d < acc[0] { d } else { acc[0] };
        }
        acc[0].min(acc[1]).min(acc[2].min(acc[3]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLaneSet {
    pub lanes: [SparseLane; 3],
    pub stride: usize,
}

/// Keeps every `stride`-th waypoint of the three base lanes. Each sparse
/// segment's bulge is fitted to the dense waypoint nearest its middle.
pub fn make_sparse(lanes: &[Lane; 3], stride: usize) -> Result<SparseLaneSet> {
    if stride == 0 {
        return Err(Error::Config("sparse stride must be at least 1".into()));
    }
    let mk = |lane: &Lane| {
        let n = lane.len();
        let starts: Vec<usize> = (0..n).step_by(stride).collect();
        let m = starts.len();
        let bulge = (0..m)
            .map(|k| {
                let s = starts[k];
                let steps = if k + 1 < m { starts[k + 1] - s } else { n - s };
                let a = lane.waypoints[s].pos();
                let b = lane.waypoints[(s + steps) % n].pos();
                let mid = lane.waypoints[(s + steps / 2) % n].pos();
                let ab = b - a;
                let l2 = ab.norm_squared();
                if steps < 2 || l2 == 0.0 {
                    return 0.0;
                }
                let t = (mid - a).dot(&ab) / l2;
                if !(0.05..=0.95).contains(&t) {
                    return 0.0;
                }
                crate::geometry::cross(&ab, &(mid - a)) / l2.sqrt() / (4.0 * t * (1.0 - t))
            })
            .collect();
        SparseLane::with_bulge(
            starts.iter().map(|&i| lane.waypoints[i].x).collect(),
            starts.iter().map(|&i| lane.waypoints[i].y).collect(),
            bulge,
        )
    };
    let set = SparseLaneSet {
        lanes: [mk(&lanes[0]), mk(&lanes[1]), mk(&lanes[2])],
        stride,
    };
    if set.lanes.iter().any(SparseLane::is_empty) {
        return Err(Error::Config("sparse lane is empty".into()));
    }
    Ok(set)
}

/// Keeps returns with `x_min ≤ x ≤ x_max` in the ego frame. Lateral
/// rejection happens in [`classify`].
pub fn crop(cloud: &PointCloud, config: &CropConfig) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .filter(|p| p.x >= config.x_min && p.x <= config.x_max)
            .copied()
            .collect(),
        stamp: cloud.stamp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Classification {
    pub counts: [u32; 3],
    pub discarded: usize,
}

/// Lane label for every point, `None` for discarded returns.
pub fn label_points(
    cloud: &PointCloud,
    ego: &Pose,
    sparse: &SparseLaneSet,
    reject_halfwidth: f64,
) -> Vec<Option<LaneId>> {
    let reject2 = reject_halfwidth * reject_halfwidth;
    let (s, c) = ego.yaw.sin_cos();
    cloud
        .points
        .iter()
        .map(|p| {
            let wx = ego.x + c * p.x - s * p.y;
            let wy = ego.y + s * p.x + c * p.y;
            // Distances beyond the rejection radius never decide a label,
            // so each lane search is capped there.
            let mut best = 0;
            let mut best_d2 = sparse.lanes[0].min_dist2_within(wx, wy, reject2);
            for k in 1..3 {
                let d2 = sparse.lanes[k].min_dist2_within(wx, wy, reject2);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = k;
                }
            }
            (best_d2 <= reject2).then(|| LaneId::BASE[best])
        })
        .collect()
}

/// Per-lane point counts of an already cropped cloud.
pub fn classify(
    cloud: &PointCloud,
    ego: &Pose,
    sparse: &SparseLaneSet,
    reject_halfwidth: f64,
) -> Classification {
    let mut out = Classification::default();
    for label in label_points(cloud, ego, sparse, reject_halfwidth) {
        match label {
            Some(lane) => out.counts[lane.index()] += 1,
            None => out.discarded += 1,
        }
    }
    out
}

/// Current and previous per-lane counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneOccupancy {
    pub counts: [u32; 3],
    pub prev: [u32; 3],
    pub stamp: f64,
}

impl Default for LaneOccupancy {
    fn default() -> Self {
        Self {
            counts: [0; 3],
            prev: [0; 3],
            stamp: f64::NEG_INFINITY,
        }
    }
}

impl LaneOccupancy {
    pub fn update(&self, counts: [u32; 3], stamp: f64) -> Result<LaneOccupancy> {
        if !(stamp > self.stamp) {
            return Err(Error::StaleStamp {
                prev: self.stamp,
                new: stamp,
            });
        }
        Ok(LaneOccupancy {
            counts,
            prev: self.counts,
            stamp,
        })
    }
}
