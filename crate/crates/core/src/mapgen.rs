//! Synthetic environments: navigation mazes built from rotated rectangles,
//! and 2-DOF planar-arm workspaces whose configuration spaces become
//! toroidal occupancy maps.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridMap, Topology};
use crate::rng::{stream, tag};

/// Bounded retries for degenerate outputs (no free cell, all-obstacle
/// configuration space).
pub const MAX_RETRIES: usize = 100;

/// Navigation maze generator settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavGenSpec {
    /// Map side length.
    pub m: usize,
    /// Minimum obstacle count per map.
    pub o_min: usize,
    /// Maximum obstacle count per map (inclusive).
    pub o_max: usize,
    /// Rectangle side lengths are drawn uniformly from [side_min, side_max].
    pub side_min: f64,
    pub side_max: f64,
    /// Master seed; instance streams derive from (seed, index).
    pub seed: u64,
}

impl NavGenSpec {
    /// Defaults: 0–5 obstacles with sides in [1, M/2].
    pub fn new(m: usize, seed: u64) -> Self {
        Self { m, o_min: 0, o_max: 5, side_min: 1.0, side_max: m as f64 / 2.0, seed }
    }

    /// The out-of-distribution variant: 15–20 obstacles, all else unchanged.
    pub fn with_ood_obstacles(mut self) -> Self {
        self.o_min = 15;
        self.o_max = 20;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidConfig(format!("map size {} < 2", self.m)));
        }
        if self.o_min > self.o_max {
            return Err(Error::InvalidConfig(format!(
                "o_min {} > o_max {}",
                self.o_min, self.o_max
            )));
        }
        if !(1.0 <= self.side_min && self.side_min <= self.side_max) ||
            self.side_max > self.m as f64 / 2.0
        {
            return Err(Error::InvalidConfig(format!(
                "rectangle sides [{}, {}] must lie within [1, {}]",
                self.side_min,
                self.side_max,
                self.m as f64 / 2.0
            )));
        }
        Ok(())
    }
}

/// Arm workspace generator settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipGenSpec {
    /// Operational-space side length. Each arm link has length P/4 in
    /// continuous workspace units.
    pub p: usize,
    /// Configuration-space discretization (M×M over joint angles).
    pub m: usize,
    pub o_min: usize,
    pub o_max: usize,
    pub seed: u64,
}

impl ManipGenSpec {
    /// Defaults: 0–5 circular obstacles.
    pub fn new(p: usize, m: usize, seed: u64) -> Self {
        Self { p, m, o_min: 0, o_max: 5, seed }
    }

    pub fn with_ood_obstacles(mut self) -> Self {
        self.o_min = 15;
        self.o_max = 20;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 4 {
            return Err(Error::InvalidConfig(format!(
                "operational space size {} must be at least 4",
                self.p
            )));
        }
        if self.m < 2 {
            return Err(Error::InvalidConfig(format!("map size {} < 2", self.m)));
        }
        if self.o_min > self.o_max {
            return Err(Error::InvalidConfig(format!(
                "o_min {} > o_max {}",
                self.o_min, self.o_max
            )));
        }
        Ok(())
    }
}

/// Circular obstacle in the operational space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    /// Center position in operational-space units.
    pub center: (f64, f64),
    pub radius: f64,
    /// Distance of the center from the operational-space center.
    pub dist_from_center: f64,
}

/// P×P workspace holding the arm base at its center plus circular obstacles.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationalSpace {
    p: usize,
    circles: Vec<Circle>,
}

impl OperationalSpace {
    pub fn new(p: usize, circles: Vec<Circle>) -> Result<Self> {
        if p < 4 {
            return Err(Error::InvalidConfig(format!(
                "operational space size {p} must be at least 4"
            )));
        }
        let pf = p as f64;
        for c in &circles {
            let d = c.dist_from_center;
            if !(0.25 * pf <= d && d <= 0.75 * pf) {
                return Err(Error::InvalidConfig(format!(
                    "circle center distance {d} outside [0.25P, 0.75P]"
                )));
            }
            if !(0.05 * pf <= c.radius && c.radius <= d - 0.15 * pf) {
                return Err(Error::InvalidConfig(format!(
                    "circle radius {} outside [0.05P, D−0.15P]",
                    c.radius
                )));
            }
        }
        Ok(Self { p, circles })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn circles(&self) -> &[Circle] {
        &self.circles
    }

    /// Exactly P/4.
    pub fn link_length(&self) -> f64 {
        self.p as f64 / 4.0
    }

    pub fn center(&self) -> (f64, f64) {
        (self.p as f64 / 2.0, self.p as f64 / 2.0)
    }

    /// Mirror image across the horizontal axis through the workspace center.
    pub fn mirrored_across_x(&self) -> Self {
        let cy = self.p as f64 / 2.0;
        let circles = self
            .circles
            .iter()
            .map(|c| Circle {
                center: (c.center.0, 2.0 * cy - c.center.1),
                radius: c.radius,
                dist_from_center: c.dist_from_center,
            })
            .collect();
        Self { p: self.p, circles }
    }
}

/// Joint angles of the two-link arm, each in [0, 2π). The second angle is
/// an absolute world-frame orientation, not relative to link 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmConfig {
    pub theta1: f64,
    pub theta2: f64,
}

impl ArmConfig {
    pub fn new(theta1: f64, theta2: f64) -> Result<Self> {
        let range = 0.0..2.0 * PI;
        if !range.contains(&theta1) || !range.contains(&theta2) {
            return Err(Error::InvalidConfig(format!(
                "joint angles ({theta1}, {theta2}) must lie in [0, 2π)"
            )));
        }
        Ok(Self { theta1, theta2 })
    }
}

/// Navigation maze for one (seed, index): 0 = free, 1 = obstacle, planar.
///
/// Per map, two orientation angles are drawn from [0, π); each rectangle
/// adopts one of the two, with continuous center and side lengths, and is
/// rasterized by cell-center inclusion. Maps with no free cell are
/// regenerated up to [`MAX_RETRIES`] times.
pub fn gen_nav_map(spec: &NavGenSpec, index: u64) -> Result<GridMap> {
    spec.validate()?;
    let m = spec.m;
    let mut rng = stream(spec.seed, index, tag::NAV_MAP);
    for _ in 0..MAX_RETRIES {
        let angle_a = rng.gen_range(0.0..PI);
        let angle_b = rng.gen_range(0.0..PI);
        let count = rng.gen_range(spec.o_min..=spec.o_max);
        let mut cells = vec![0u8; m * m];
        for _ in 0..count {
            let cx = rng.gen_range(0.0..m as f64);
            let cy = rng.gen_range(0.0..m as f64);
            let w = rng.gen_range(spec.side_min..=spec.side_max);
            let h = rng.gen_range(spec.side_min..=spec.side_max);
            let angle = if rng.gen_bool(0.5) { angle_a } else { angle_b };
            let (sin, cos) = angle.sin_cos();
            for r in 0..m {
                for c in 0..m {
                    // Cell center in (x=col, y=row) coordinates.
                    let px = c as f64 + 0.5 - cx;
                    let py = r as f64 + 0.5 - cy;
                    let u = px * cos + py * sin;
                    let v = -px * sin + py * cos;
                    if u.abs() <= w / 2.0 && v.abs() <= h / 2.0 {
                        cells[r * m + c] = 1;
                    }
                }
            }
        }
        if cells.iter().any(|&c| c == 0) {
            return GridMap::new(m, cells, Topology::Planar);
        }
    }
    Err(Error::GenerationFailed {
        attempts: MAX_RETRIES,
        reason: "navigation map never had a free cell".into(),
    })
}

/// Arm workspace for one (seed, index): obstacle count uniform in
/// [o_min, o_max], centers uniform in angle with distance in [0.25P, 0.75P],
/// radius uniform in [0.05P, D − 0.15P].
pub fn gen_manip_env(spec: &ManipGenSpec, index: u64) -> Result<OperationalSpace> {
    spec.validate()?;
    let pf = spec.p as f64;
    let mut rng = stream(spec.seed, index, tag::MANIP_ENV);
    let count = rng.gen_range(spec.o_min..=spec.o_max);
    let mut circles = Vec::with_capacity(count);
    for _ in 0..count {
        let angle = rng.gen_range(0.0..2.0 * PI);
        let d = rng.gen_range(0.25 * pf..=0.75 * pf);
        let radius = rng.gen_range(0.05 * pf..=(d - 0.15 * pf));
        circles.push(Circle {
            center: (pf / 2.0 + d * angle.cos(), pf / 2.0 + d * angle.sin()),
            radius,
            dist_from_center: d,
        });
    }
    OperationalSpace::new(spec.p, circles)
}

/// Top-down occupancy image of the workspace: a p×p binary raster where a
/// cell is 1 iff its center lies inside any obstacle circle.
pub fn rasterize_env(env: &OperationalSpace, p: usize) -> Vec<u8> {
    let scale = env.p() as f64 / p as f64;
    let mut raster = vec![0u8; p * p];
    for r in 0..p {
        let y = (r as f64 + 0.5) * scale;
        for c in 0..p {
            let x = (c as f64 + 0.5) * scale;
            let inside = env.circles().iter().any(|circle| {
                let dx = x - circle.center.0;
                let dy = y - circle.center.1;
                dx * dx + dy * dy < circle.radius * circle.radius
            });
            if inside {
                raster[r * p + c] = 1;
            }
        }
    }
    raster
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Whether the arm pose intersects any obstacle: true iff some circle
/// center lies closer than its radius to either link segment.
pub fn arm_collides(env: &OperationalSpace, cfg: &ArmConfig) -> bool {
    let l = env.link_length();
    let c0 = env.center();
    let c1 = (c0.0 + l * cfg.theta1.cos(), c0.1 + l * cfg.theta1.sin());
    let c2 = (c1.0 + l * cfg.theta2.cos(), c1.1 + l * cfg.theta2.sin());
    env.circles().iter().any(|circle| {
        point_segment_distance(circle.center, c0, c1) < circle.radius
            || point_segment_distance(circle.center, c1, c2) < circle.radius
    })
}

/// Discretizes the arm's joint space: cell (i, j) is an obstacle iff the
/// arm collides at θ1 = 2πi/M, θ2 = 2πj/M. The result is toroidal because
/// angles wrap. An all-obstacle result is a generation failure; callers
/// regenerate the environment.
pub fn config_space(env: &OperationalSpace, m: usize) -> Result<GridMap> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!("map size {m} < 2")));
    }
    let mut cells = vec![0u8; m * m];
    for i in 0..m {
        let theta1 = 2.0 * PI * i as f64 / m as f64;
        for j in 0..m {
            let theta2 = 2.0 * PI * j as f64 / m as f64;
            let cfg = ArmConfig { theta1, theta2 };
            if arm_collides(env, &cfg) {
                cells[i * m + j] = 1;
            }
        }
    }
    if cells.iter().all(|&c| c == 1) {
        return Err(Error::GenerationFailed {
            attempts: 1,
            reason: "configuration space has no free cell".into(),
        });
    }
    GridMap::new(m, cells, Topology::Toroidal)
}

/// Arm workspace plus its configuration space, regenerating degenerate
/// environments with fresh sub-streams up to [`MAX_RETRIES`] times.
pub fn gen_manip_instance(spec: &ManipGenSpec, index: u64) -> Result<(OperationalSpace, GridMap)> {
    let mut attempt_spec = *spec;
    for attempt in 0..MAX_RETRIES {
        // Fold the attempt number into the seed so retries see new draws
        // while staying a pure function of (seed, index).
        attempt_spec.seed = spec.seed.wrapping_add((attempt as u64) << 48);
        let env = gen_manip_env(&attempt_spec, index)?;
        match config_space(&env, spec.m) {
            Ok(map) => return Ok((env, map)),
            Err(Error::GenerationFailed { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::GenerationFailed {
        attempts: MAX_RETRIES,
        reason: "configuration space never had a free cell".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_obstacles_gives_all_free_map() {
        let spec = NavGenSpec { o_min: 0, o_max: 0, ..NavGenSpec::new(15, 3) };
        let map = gen_nav_map(&spec, 0).unwrap();
        assert!(map.cells().iter().all(|&c| c == 0));
        assert_eq!(map.topology(), Topology::Planar);
    }

    #[test]
    fn same_seed_and_index_reproduce_bit_identical_maps() {
        let spec = NavGenSpec::new(15, 11);
        let a = gen_nav_map(&spec, 42).unwrap();
        let b = gen_nav_map(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_nav_map(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn obstacle_fraction_is_sane() {
        let spec = NavGenSpec::new(15, 5);
        let mut obstacle_cells = 0usize;
        let total = 2000;
        for i in 0..total {
            let map = gen_nav_map(&spec, i).unwrap();
            obstacle_cells += map.cells().iter().filter(|&&c| c == 1).count();
        }
        let fraction = obstacle_cells as f64 / (total as f64 * 225.0);
        assert!(fraction > 0.0 && fraction < 0.9, "fraction {fraction}");
    }

    #[test]
    fn ood_spec_only_changes_counts() {
        let base = NavGenSpec::new(15, 7);
        let ood = base.with_ood_obstacles();
        assert_eq!((ood.o_min, ood.o_max), (15, 20));
        assert_eq!(ood.m, base.m);
        assert_eq!(ood.side_min, base.side_min);
        assert_eq!(ood.side_max, base.side_max);
        let manip = ManipGenSpec::new(64, 18, 7).with_ood_obstacles();
        assert_eq!((manip.o_min, manip.o_max), (15, 20));
        assert_eq!(manip.p, 64);
    }

    #[test]
    fn manip_env_obeys_sampling_bounds() {
        let spec = ManipGenSpec { o_min: 3, o_max: 8, ..ManipGenSpec::new(64, 18, 9) };
        for i in 0..50 {
            let env = gen_manip_env(&spec, i).unwrap();
            let pf = 64.0;
            for c in env.circles() {
                assert!(c.dist_from_center - c.radius >= 0.15 * pf - 1e-9);
                assert!(c.radius >= 0.05 * pf);
            }
        }
        let a = gen_manip_env(&spec, 4).unwrap();
        let b = gen_manip_env(&spec, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_circles_never_collide() {
        let env = OperationalSpace::new(64, vec![]).unwrap();
        for i in 0..8 {
            let cfg = ArmConfig::new(i as f64 * 0.7, (i as f64 * 1.3) % (2.0 * PI)).unwrap();
            assert!(!arm_collides(&env, &cfg));
        }
        let map = config_space(&env, 18).unwrap();
        assert!(map.cells().iter().all(|&c| c == 0));
        assert_eq!(map.topology(), Topology::Toroidal);
    }

    #[test]
    fn circle_on_link_midpoint_collides() {
        // Circle centered exactly on link 1's midpoint: distance 0 < radius.
        let p = 80usize;
        let pf = p as f64;
        let theta1 = 0.7f64;
        let l = pf / 4.0;
        let mid = (pf / 2.0 + 0.5 * l * theta1.cos(), pf / 2.0 + 0.5 * l * theta1.sin());
        let d = ((mid.0 - pf / 2.0).powi(2) + (mid.1 - pf / 2.0).powi(2)).sqrt();
        // d = L/2 = 0.125P < 0.25P, below the generator's sampling range, so
        // build the circle directly rather than through the validator.
        let circle = Circle { center: mid, radius: 0.06 * pf, dist_from_center: d };
        let env = OperationalSpace { p, circles: vec![circle] };
        assert!(arm_collides(&env, &ArmConfig::new(theta1, 1.0).unwrap()));
    }

    #[test]
    fn distant_circle_never_collides() {
        // Both links stay within radius P/2 of the center, so a circle
        // farther than P/2 + radius can never touch the arm.
        let p = 64usize;
        let pf = p as f64;
        let radius = 0.05 * pf;
        let d = 0.75 * pf; // > P/2 + 0.05P + margin? 0.75P − 0.05P = 0.7P > 0.5P ✓
        let circle = Circle { center: (pf / 2.0 + d, pf / 2.0), radius, dist_from_center: d };
        let env = OperationalSpace::new(p, vec![circle]).unwrap();
        assert!(d - radius > pf / 2.0);
        for i in 0..12 {
            for j in 0..12 {
                let cfg = ArmConfig {
                    theta1: 2.0 * PI * i as f64 / 12.0,
                    theta2: 2.0 * PI * j as f64 / 12.0,
                };
                assert!(!arm_collides(&env, &cfg));
            }
        }
    }

    #[test]
    fn circle_blocking_link1_sweep_fills_rows() {
        // A circle straddling link 1's reach at angle 0 makes every (0, j)
        // cell collide; pointing the arm the other way stays free.
        let p = 80usize;
        let pf = p as f64;
        let d = 0.4 * pf;
        let circle = Circle {
            center: (pf / 2.0 + d, pf / 2.0),
            radius: 0.2 * pf,
            dist_from_center: d,
        };
        let env = OperationalSpace::new(p, vec![circle]).unwrap();
        let m = 18;
        let map = config_space(&env, m).unwrap();
        for j in 0..m {
            assert!(map.is_obstacle((0, j)), "cell (0, {j}) should collide");
            assert!(map.is_free((m / 2, j)), "cell ({}, {j}) should be free", m / 2);
        }
    }

    #[test]
    fn raster_count_tracks_disc_area_at_radius_03p() {
        // A 0.3P-radius disc centered in the image (built directly; the
        // generator's distance bounds would push it off the edge).
        let p = 90usize;
        let pf = p as f64;
        let circle =
            Circle { center: (pf / 2.0, pf / 2.0), radius: 0.3 * pf, dist_from_center: 0.0 };
        let env = OperationalSpace { p, circles: vec![circle] };
        let raster = rasterize_env(&env, p);
        let count = raster.iter().filter(|&&v| v == 1).count() as f64;
        let area = std::f64::consts::PI * (0.3 * pf) * (0.3 * pf);
        assert!((count - area).abs() / area < 0.05, "count {count} vs area {area}");
    }

    #[test]
    fn mirrored_env_flips_configuration_space() {
        let spec = ManipGenSpec::new(64, 18, 21);
        let env = gen_manip_env(&spec, 5).unwrap();
        let m = 18;
        let a = config_space(&env, m).unwrap();
        let b = config_space(&env.mirrored_across_x(), m).unwrap();
        for i in 0..m {
            for j in 0..m {
                let mi = (m - i) % m;
                let mj = (m - j) % m;
                assert_eq!(a.is_obstacle((i, j)), b.is_obstacle((mi, mj)));
            }
        }
    }
}
