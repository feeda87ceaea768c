//! Planar raycast LiDAR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{heading_vec, OrientedBox, Pose, Segment, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub beam_count: usize,
    /// Field of view in radians, centered on the vehicle heading.
    pub fov: f64,
    pub max_range: f64,
    pub rate: f64,
    pub noise_sigma: f64,
    /// Noise seed; a scenario sets it from its top-level `seed`.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            beam_count: 720,
            fov: 2.0 * std::f64::consts::PI,
            max_range: 120.0,
            rate: 10.0,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_count < 36 {
            return Err(Error::Config("lidar beam_count must be at least 36".into()));
        }
        if !(self.fov > 0.0 && self.fov <= 2.0 * std::f64::consts::PI + 1e-12) {
            return Err(Error::Config("lidar fov must be in (0, 2π]".into()));
        }
        if !(self.max_range > 0.0) || !(self.rate > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "lidar max_range and rate must be positive, noise_sigma non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Beam azimuth relative to the vehicle heading.
    pub fn beam_angle(&self, beam: usize) -> f64 {
        -0.5 * self.fov + self.fov * (beam as f64 + 0.5) / self.beam_count as f64
    }
}

/// Ego-frame returns: x forward, y left.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec2>,
    pub stamp: f64,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Gaussian range noise for one beam, a pure function of
/// (seed, scan index, beam index), truncated to ±5σ.
fn beam_noise(rng: &mut ChaCha8Rng, beam: usize, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    // Two u64 draws per beam = four 32-bit words.
    rng.set_word_pos(beam as u128 * 4);
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    (z * sigma).clamp(-5.0 * sigma, 5.0 * sigma)
}

/// Casts every beam against the car bodies and walls and returns the first
/// hit of each beam within range. Beams with no hit produce no point.
pub fn scan(
    ego: &Pose,
    npc_boxes: &[OrientedBox],
    walls: &[Segment],
    config: &LidarConfig,
    stamp: f64,
) -> PointCloud {
    let origin = ego.position();
    let range = config.max_range;
    let mut segs: Vec<Segment> = walls
        .iter()
        .filter(|s| s.distance_to(&origin) <= range)
        .copied()
        .collect();
    for b in npc_boxes {
        if (b.center - origin).norm() - b.half_length - b.half_width <= range {
            segs.extend_from_slice(&b.edges());
        }
    }

    let scan_index = (stamp * config.rate).round() as i64 as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(scan_index);

    let mut points = Vec::new();
    for beam in 0..config.beam_count {
        let rel = config.beam_angle(beam);
        let dir = heading_vec(ego.yaw + rel);
        let mut best = f64::INFINITY;
        for s in &segs {
            if let Some(t) = s.ray_hit(&origin, &dir) {
                if t < best {
                    best = t;
                }
            }
        }
        if best <= range {
            let r = best + beam_noise(&mut rng, beam, config.noise_sigma);
            points.push(heading_vec(rel) * r);
        }
    }
    PointCloud { points, stamp }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> LidarConfig {
        LidarConfig {
            noise_sigma: 0.0,
            ..LidarConfig::default()
        }
    }

    #[test]
    fn empty_world_gives_empty_cloud() {
        let c = scan(&Pose::new(0.0, 0.0, 0.0), &[], &[], &noiseless(), 0.1);
        assert!(c.is_empty());
        assert_eq!(c.stamp, 0.1);
    }

    #[test]
    fn car_ahead_hits_near_face() {
        let car = OrientedBox::new(Vec2::new(20.0, 0.0), 0.0, 5.0, 1.9);
        let c = scan(&Pose::new(0.0, 0.0, 0.0), &[car], &[], &noiseless(), 0.0);
        assert!(!c.is_empty());
        let nearest = c.points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        assert!((nearest - 17.5).abs() < 1e-9);
        for p in &c.points {
            let d = car.edges().iter().map(|e| e.distance_to(p)).fold(f64::INFINITY, f64::min);
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn ego_pose_transforms_points() {
        // Rotated and translated ego sees the same car at the same range.
        let car = OrientedBox::new(Vec2::new(10.0, 30.0), std::f64::consts::FRAC_PI_2, 5.0, 1.9);
        let ego = Pose::new(10.0, 10.0, std::f64::consts::FRAC_PI_2);
        let c = scan(&ego, &[car], &[], &noiseless(), 0.0);
        let nearest = c.points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        assert!((nearest - 17.5).abs() < 1e-9);
    }

    #[test]
    fn occluded_car_is_invisible() {
        let a = OrientedBox::new(Vec2::new(20.0, 0.0), 0.0, 5.0, 1.9);
        let b = OrientedBox::new(Vec2::new(40.0, 0.0), 0.0, 5.0, 1.9);
        let c = scan(&Pose::new(0.0, 0.0, 0.0), &[a, b], &[], &noiseless(), 0.0);
        assert!(c.points.iter().all(|p| p.x < 30.0));
    }

    #[test]
    fn noise_is_deterministic_and_bounded() {
        let car = OrientedBox::new(Vec2::new(20.0, 0.0), 0.0, 5.0, 1.9);
        let cfg = LidarConfig {
            seed: 7,
            noise_sigma: 0.05,
            ..LidarConfig::default()
        };
        let pose = Pose::new(0.0, 0.0, 0.0);
        let a = scan(&pose, &[car], &[], &cfg, 0.3);
        let b = scan(&pose, &[car], &[], &cfg, 0.3);
        assert_eq!(a, b);
        let other = scan(&pose, &[car], &[], &cfg, 0.4);
        assert_ne!(a, other);
        for p in &a.points {
            assert!(p.norm() <= cfg.max_range + 5.0 * cfg.noise_sigma);
        }
    }

    #[test]
    fn validate_rejects_bad_config() {
        let bad = LidarConfig {
            beam_count: 10,
            ..LidarConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LidarConfig {
            fov: 7.0,
            ..LidarConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(LidarConfig::default().validate().is_ok());
    }
}
