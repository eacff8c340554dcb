//! Local value-propagation baseline: a reward convolution followed by K
//! rounds of 3×3 convolution and channel-max, so distance information moves
//! at most one cell per round. Trained on the same distance-regression
//! objective as the attention planner so both share one metric path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{uniform_init, Binding, Graph, PadMode, ParamId, ParamSet, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{DistanceField, GoalSpec, GridMap, Topology};
use crate::spt::SptModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VINConfig {
    /// Map side length.
    pub m: usize,
    /// Value-iteration round count; the receptive field radius.
    pub k: usize,
    /// Reward-map channels produced by the 1×1 input convolution.
    pub reward_channels: usize,
    /// Q channels of the 3×3 propagation convolution.
    pub q_channels: usize,
}

impl VINConfig {
    pub fn new(m: usize, k: usize) -> Self {
        Self { m, k, reward_channels: 16, q_channels: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("iteration count K must be ≥ 1".into()));
        }
        if self.m < 2 || self.reward_channels == 0 || self.q_channels == 0 {
            return Err(Error::InvalidConfig(format!("invalid VIN dimensions: {self:?}")));
        }
        Ok(())
    }
}

struct VinIds {
    reward_w: ParamId,
    reward_b: ParamId,
    q_w: ParamId,
    q_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

pub struct VinModel<T: Scalar> {
    pub config: VINConfig,
    pub params: ParamSet<T>,
    ids: VinIds,
}

impl<T: Scalar> VinModel<T> {
    pub fn new(config: VINConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let r = config.reward_channels;
        let q = config.q_channels;
        let ids = VinIds {
            reward_w: params.add("vin.reward.w", uniform_init(&mut rng, &[r, 2, 1, 1], 2))?,
            reward_b: params.add("vin.reward.b", Tensor::zeros(&[r]))?,
            q_w: params
                .add("vin.q.w", uniform_init(&mut rng, &[q, r + 1, 3, 3], (r + 1) * 9))?,
            q_b: params.add("vin.q.b", Tensor::zeros(&[q]))?,
            head_w: params.add("vin.head.w", uniform_init(&mut rng, &[1, 1, 1, 1], 1))?,
            head_b: params.add("vin.head.b", Tensor::zeros(&[1]))?,
        };
        // The iteration count rides along in the checkpoint so a saved
        // model is self-describing.
        params.add("vin.k", Tensor::full(&[1], T::of_f64(config.k as f64)))?;
        Ok(Self { config, params, ids })
    }

    pub fn from_params(config: VINConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let lookup = |name: &str| {
            params.id(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let ids = VinIds {
            reward_w: lookup("vin.reward.w")?,
            reward_b: lookup("vin.reward.b")?,
            q_w: lookup("vin.q.w")?,
            q_b: lookup("vin.q.b")?,
            head_w: lookup("vin.head.w")?,
            head_b: lookup("vin.head.b")?,
        };
        lookup("vin.k")?;
        Ok(Self { config, params, ids })
    }

    /// Reads K and channel widths out of checkpoint shapes/values.
    pub fn config_from_params(params: &ParamSet<T>, m: usize) -> Result<VINConfig> {
        let rw = params
            .id("vin.reward.w")
            .ok_or_else(|| Error::Checkpoint("missing tensor vin.reward.w".into()))?;
        let qw = params
            .id("vin.q.w")
            .ok_or_else(|| Error::Checkpoint("missing tensor vin.q.w".into()))?;
        let kid =
            params.id("vin.k").ok_or_else(|| Error::Checkpoint("missing tensor vin.k".into()))?;
        let config = VINConfig {
            m,
            k: params.value(kid).data()[0].as_f64().round() as usize,
            reward_channels: params.value(rw).shape()[0],
            q_channels: params.value(qw).shape()[0],
        };
        config.validate()?;
        Ok(config)
    }

    fn pad_mode(topology: Topology) -> PadMode {
        match topology {
            Topology::Planar => PadMode::Zero,
            Topology::Toroidal => PadMode::Circular,
        }
    }

    /// (B,2,M,M) input → (B,M,M) distance prediction. The reward map comes
    /// from a 1×1 convolution; K rounds of 3×3 convolution over [reward;
    /// value] followed by a channel max propagate values locally; a
    /// position-wise affine head reads out distances. Toroidal maps use
    /// circular padding, planar maps zero padding.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        x: Var,
        batch: usize,
        topology: Topology,
    ) -> Result<Var> {
        let m = self.config.m;
        let shape = g.value(x).shape().to_vec();
        if shape != [batch, 2, m, m] {
            return Err(Error::ShapeMismatch { op: "vin_forward", lhs: shape, rhs: vec![batch, 2, m, m] });
        }
        let mode = Self::pad_mode(topology);
        let r = g.conv2d(
            x,
            binding.var(self.ids.reward_w),
            Some(binding.var(self.ids.reward_b)),
            1,
            0,
            PadMode::Zero,
        )?;
        let mut v = g.constant(Tensor::zeros(&[batch, 1, m, m]));
        for _ in 0..self.config.k {
            let rv = g.concat(&[r, v], 1)?;
            let q = g.conv2d(
                rv,
                binding.var(self.ids.q_w),
                Some(binding.var(self.ids.q_b)),
                1,
                1,
                mode,
            )?;
            v = g.channel_max(q)?;
        }
        let out = g.conv2d(
            v,
            binding.var(self.ids.head_w),
            Some(binding.var(self.ids.head_b)),
            1,
            0,
            PadMode::Zero,
        )?;
        g.reshape(out, &[batch, m, m])
    }

    /// Single-instance inference convenience.
    pub fn predict(&self, map: &GridMap, goal: GoalSpec) -> Result<DistanceField> {
        let mut g = Graph::new();
        let binding = self.params.bind(&mut g, false);
        let planes = SptModel::<T>::input_planes(map, goal)?;
        let batched = planes.reshaped(&[1, 2, map.size(), map.size()])?;
        let x = g.constant(batched);
        let pred = self.forward(&mut g, &binding, x, 1, map.topology())?;
        let values = g.value(pred).data().iter().map(|v| v.as_f64() as f32).collect();
        DistanceField::from_prediction(map.size(), values)
    }
}

/// Iteration budget for the baseline: the largest K in {10, 20, 30, …}
/// whose measured per-map inference time stays within 1.1× the reference
/// planner's, capped by `max_k`. Falls back to K = 10 (with the warning
/// flag set) when even that exceeds the budget.
pub fn tune_k(
    reference_ms_per_map: f64,
    mut vin_ms_per_map: impl FnMut(usize) -> f64,
    max_k: usize,
) -> TuneKReport {
    let budget = 1.1 * reference_ms_per_map;
    let mut admissible = Vec::new();
    let mut k = 10;
    while k <= max_k {
        let ms = vin_ms_per_map(k);
        if ms <= budget {
            admissible.push((k, ms));
        } else {
            break; // VIN cost is monotone in K
        }
        k += 10;
    }
    match admissible.last() {
        Some(&(k, _)) => TuneKReport { k, admissible, warned: false, budget_ms: budget },
        None => TuneKReport { k: 10, admissible, warned: true, budget_ms: budget },
    }
}

#[derive(Debug, Clone)]
pub struct TuneKReport {
    pub k: usize,
    /// (K, measured ms/map) for every admissible candidate.
    pub admissible: Vec<(usize, f64)>,
    /// True when not even K = 10 fit the budget.
    pub warned: bool,
    pub budget_ms: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perturb_probe(k: usize, distance: usize) -> bool {
        // Returns true when perturbing an input cell at the given Chebyshev
        // distance from the probed output cell changes that output.
        let m = 13usize;
        let config = VINConfig::new(m, k);
        let model = VinModel::<f64>::new(config, 5).unwrap();
        let center = (6usize, 6usize);
        let mut base = vec![0.0f32; 2 * m * m];
        base[3 * m + 4] = 1.0; // some obstacle
        base[m * m + 2 * m + 2] = 1.0; // goal plane
        let run = |planes: &[f32]| -> f64 {
            let mut g = Graph::<f64>::new();
            let binding = model.params.bind(&mut g, false);
            let x = g.constant(
                Tensor::from_f32(&[1, 2, m, m], planes).unwrap(),
            );
            let out = model.forward(&mut g, &binding, x, 1, Topology::Planar).unwrap();
            g.value(out).data()[center.0 * m + center.1].as_f64()
        };
        let before = run(&base);
        let mut perturbed = base.clone();
        perturbed[(center.0 + distance) * m + center.1] += 0.75;
        let after = run(&perturbed);
        before != after
    }

    #[test]
    fn receptive_field_radius_is_exactly_k() {
        for k in [1usize, 3] {
            assert!(!perturb_probe(k, k + 1), "K={k}: change beyond radius leaked in");
            assert!(perturb_probe(k, k), "K={k}: change at radius should reach the probe");
            assert!(perturb_probe(k, 1), "K={k}: adjacent change should reach the probe");
        }
    }

    #[test]
    fn toroidal_shift_equivariance() {
        let m = 8usize;
        let model = VinModel::<f64>::new(VINConfig::new(m, 4), 9).unwrap();
        let mut planes = vec![0.0f32; 2 * m * m];
        planes[m + 3] = 1.0;
        planes[5 * m + 6] = 1.0;
        planes[m * m + 2 * m + 2] = 1.0;
        let run = |p: &[f32]| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let binding = model.params.bind(&mut g, false);
            let x = g.constant(Tensor::from_f32(&[1, 2, m, m], p).unwrap());
            let out = model.forward(&mut g, &binding, x, 1, Topology::Toroidal).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&planes);
        // Shift input by (dr, dc) = (3, 5) cyclically.
        let (dr, dc) = (3usize, 5usize);
        let mut shifted = vec![0.0f32; 2 * m * m];
        for ch in 0..2 {
            for r in 0..m {
                for c in 0..m {
                    shifted[ch * m * m + ((r + dr) % m) * m + ((c + dc) % m)] =
                        planes[ch * m * m + r * m + c];
                }
            }
        }
        let out_shifted = run(&shifted);
        for r in 0..m {
            for c in 0..m {
                let a = base[r * m + c];
                let b = out_shifted[((r + dr) % m) * m + ((c + dc) % m)];
                assert!((a - b).abs() < 1e-12, "equivariance broke at ({r},{c})");
            }
        }
    }

    #[test]
    fn tune_k_picks_largest_admissible() {
        // Linear VIN cost: 0.02 ms per iteration.
        let report = tune_k(1.0, |k| 0.02 * k as f64, 100);
        assert_eq!(report.k, 50); // 0.02·50 = 1.0 ≤ 1.1
        assert!(!report.warned);

        // Budget below K=10's cost: falls back with a warning.
        let report = tune_k(0.1, |k| 0.02 * k as f64, 100);
        assert_eq!(report.k, 10);
        assert!(report.warned);
    }

    #[test]
    fn tune_k_budget_monotonicity() {
        let cost = |k: usize| 0.03 * k as f64;
        for budget in [0.5f64, 1.0, 2.0, 4.0] {
            let small = tune_k(budget, cost, 200);
            let large = tune_k(budget * 2.0, cost, 200);
            assert!(large.admissible.len() >= small.admissible.len());
        }
    }

    #[test]
    fn checkpoint_roundtrip_recovers_k() {
        let model = VinModel::<f32>::new(VINConfig::new(10, 30), 3).unwrap();
        let cfg = VinModel::config_from_params(&model.params, 10).unwrap();
        assert_eq!(cfg.k, 30);
        assert_eq!(cfg.reward_channels, 16);
        assert_eq!(cfg.q_channels, 4);
    }
}
