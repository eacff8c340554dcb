//! Supervision variants: dense targets over every cell (including the −1
//! sentinels), Gaussian-noised targets, and sparse masks covering only a
//! handful of optimal trajectories.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PlanningInstance;
use crate::oracle::optimal_actions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionMode {
    Dense,
    Noisy,
    Sparse,
    #[serde(rename = "noisy+sparse")]
    NoisySparse,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisionSpec {
    pub mode: SupervisionMode,
    /// Noise standard deviation in noisy modes.
    pub sigma: f64,
    /// Trajectories per map in sparse modes.
    pub n_traj: usize,
}

impl Default for SupervisionSpec {
    fn default() -> Self {
        Self { mode: SupervisionMode::Dense, sigma: 1.0, n_traj: 5 }
    }
}

impl SupervisionSpec {
    pub fn new(mode: SupervisionMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mode = match s {
            "dense" => SupervisionMode::Dense,
            "noisy" => SupervisionMode::Noisy,
            "sparse" => SupervisionMode::Sparse,
            "noisy+sparse" => SupervisionMode::NoisySparse,
            other => {
                return Err(Error::InvalidConfig(format!("unknown supervision mode {other}")))
            }
        };
        Ok(Self::new(mode))
    }

    pub fn is_noisy(&self) -> bool {
        matches!(self.mode, SupervisionMode::Noisy | SupervisionMode::NoisySparse)
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.mode, SupervisionMode::Sparse | SupervisionMode::NoisySparse)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_noisy() && !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noisy supervision needs sigma > 0, got {}",
                self.sigma
            )));
        }
        if self.is_sparse() && self.n_traj == 0 {
            return Err(Error::InvalidConfig("sparse supervision needs n_traj ≥ 1".into()));
        }
        Ok(())
    }
}

/// Adds independent zero-mean Gaussian noise to every supervised value.
pub fn corrupt_noisy<R: Rng>(values: &[f32], sigma: f64, rng: &mut R) -> Vec<f32> {
    let normal = Normal::new(0.0, sigma).expect("sigma validated positive");
    values.iter().map(|&v| v + normal.sample(rng) as f32).collect()
}

/// Supervision mask from `n_traj` greedy trajectories: start cells sampled
/// uniformly over reachable free cells, optimal-action ties broken
/// uniformly at random, every visited cell (goal included) masked in.
pub fn sparsify<R: Rng>(
    instance: &PlanningInstance,
    n_traj: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let m = instance.size();
    let reachable: Vec<(usize, usize)> = (0..m * m)
        .map(|i| (i / m, i % m))
        .filter(|&c| instance.map.is_free(c) && instance.gt.get(c) >= 0.0)
        .collect();
    if reachable.is_empty() {
        return Err(Error::Contract("sparsify needs at least one reachable cell".into()));
    }
    let optimal = optimal_actions(&instance.gt, &instance.map);
    let mut mask = vec![0.0f32; m * m];
    for _ in 0..n_traj {
        let mut cell = reachable[rng.gen_range(0..reachable.len())];
        loop {
            mask[cell.0 * m + cell.1] = 1.0;
            if instance.gt.get(cell) == 0.0 {
                break;
            }
            let actions = optimal.actions(cell);
            debug_assert!(!actions.is_empty(), "reachable non-goal cell has an optimal action");
            let action = actions[rng.gen_range(0..actions.len())];
            let neighbors = instance.map.neighbors(cell)?;
            cell = neighbors[action.index()].1.expect("optimal action leads in bounds");
        }
    }
    Ok(mask)
}

/// Target and mask planes for one instance under a supervision spec.
/// Dense modes supervise every cell, −1 sentinels included; sparse modes
/// supervise only trajectory cells. Fixed per instance across epochs.
pub fn build_supervision<R: Rng>(
    instance: &PlanningInstance,
    spec: &SupervisionSpec,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<f32>)> {
    spec.validate()?;
    let m = instance.size();
    let mask = if spec.is_sparse() {
        sparsify(instance, spec.n_traj, rng)?
    } else {
        vec![1.0f32; m * m]
    };
    let target = if spec.is_noisy() {
        corrupt_noisy(instance.gt.values(), spec.sigma, rng)
    } else {
        instance.gt.values().to_vec()
    };
    Ok((target, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GoalSpec, GridMap, Topology};
    use crate::oracle::dijkstra_field;
    use crate::rng::{stream, tag};

    fn instance(m: usize) -> PlanningInstance {
        let map = GridMap::empty(m, Topology::Planar);
        let goal = GoalSpec::new(m / 2, m / 2);
        let gt = dijkstra_field(&map, goal).unwrap();
        PlanningInstance::new(map, goal, gt).unwrap()
    }

    #[test]
    fn noise_statistics_match_sigma_one() {
        let clean = vec![5.0f32; 1_000_000];
        let mut rng = stream(0, 0, tag::SUPERVISION);
        let noisy = corrupt_noisy(&clean, 1.0, &mut rng);
        let n = noisy.len() as f64;
        let mean: f64 = noisy.iter().map(|&v| (v - 5.0) as f64).sum::<f64>() / n;
        let var: f64 = noisy.iter().map(|&v| ((v - 5.0) as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "sample mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.01, "sample std {}", var.sqrt());
    }

    #[test]
    fn vanishing_sigma_leaves_values_unchanged() {
        let clean = vec![3.0f32, -1.0, 7.5, 0.0];
        let mut rng = stream(2, 9, tag::SUPERVISION);
        let noisy = corrupt_noisy(&clean, 1e-30, &mut rng);
        for (n, c) in noisy.iter().zip(clean.iter()) {
            assert!((n - c).abs() <= 1e-20);
        }
    }

    #[test]
    fn noise_is_deterministic_given_stream() {
        let clean = vec![1.0f32; 64];
        let a = corrupt_noisy(&clean, 1.0, &mut stream(3, 7, tag::SUPERVISION));
        let b = corrupt_noisy(&clean, 1.0, &mut stream(3, 7, tag::SUPERVISION));
        assert_eq!(a, b);
    }

    #[test]
    fn sparse_mask_cells_descend_to_goal() {
        let inst = instance(9);
        let mut rng = stream(1, 2, tag::SUPERVISION);
        let mask = sparsify(&inst, 5, &mut rng).unwrap();
        let m = inst.size();
        // Goal is masked in; every masked cell with gt > 0 has a masked-in
        // or reachable neighbor one step closer (monotone chains).
        assert_eq!(mask[(m / 2) * m + m / 2], 1.0);
        for r in 0..m {
            for c in 0..m {
                if mask[r * m + c] == 1.0 && inst.gt.get((r, c)) > 0.0 {
                    let has_descent = inst
                        .map
                        .neighbors((r, c))
                        .unwrap()
                        .iter()
                        .filter_map(|(_, n)| *n)
                        .any(|n| inst.gt.get(n) == inst.gt.get((r, c)) - 1.0);
                    assert!(has_descent);
                }
            }
        }
    }

    #[test]
    fn saturated_trajectories_cover_all_reachable_cells() {
        // 2×2 map: 4 cells, plenty of trajectories cover everything.
        let inst = instance(2);
        let mut rng = stream(4, 4, tag::SUPERVISION);
        let mask = sparsify(&inst, 64, &mut rng).unwrap();
        assert!(mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dense_mask_covers_everything_sparse_is_subset() {
        let inst = instance(7);
        let spec = SupervisionSpec::default();
        let mut rng = stream(0, 1, tag::SUPERVISION);
        let (target, mask) = build_supervision(&inst, &spec, &mut rng).unwrap();
        assert!(mask.iter().all(|&v| v == 1.0));
        assert_eq!(target, inst.gt.values());

        let sparse = SupervisionSpec::new(SupervisionMode::Sparse);
        let mut rng = stream(0, 1, tag::SUPERVISION);
        let (_, sparse_mask) = build_supervision(&inst, &sparse, &mut rng).unwrap();
        assert!(sparse_mask.iter().zip(mask.iter()).all(|(s, d)| s <= d));
        assert!(sparse_mask.iter().any(|&v| v == 0.0));
    }

    #[test]
    fn spec_validation() {
        let mut spec = SupervisionSpec::new(SupervisionMode::Noisy);
        spec.sigma = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = SupervisionSpec::new(SupervisionMode::Sparse);
        spec.n_traj = 0;
        assert!(spec.validate().is_err());
        assert!(SupervisionSpec::parse("noisy+sparse").unwrap().is_noisy());
        assert!(SupervisionSpec::parse("bogus").is_err());
    }
}
