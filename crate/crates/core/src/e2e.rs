//! End-to-end manipulation mapping and planning: a transformer mapper turns
//! the P×P workspace raster into an M×M occupancy probability map, a frozen
//! pretrained planner turns that map plus the goal into action distances,
//! and only distance supervision reaches the loss — the mapper never sees a
//! ground-truth map.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{
    decay_lr, sgd_step, sgd_step_momentum, uniform_init, Binding, Graph, PadMode, ParamId,
    ParamSet, Scalar, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::eval::{action_accuracy_counts, map_accuracy};
use crate::grid::{goal_onehot, DistanceField, GoalSpec, PlanningInstance};
use crate::oracle::optimal_actions;
use crate::rng::{stream, tag};
use crate::spt::{positional_encoding_tokens, SptModel, Trunk};
use crate::train::{EpochMetrics, SupervisionSpec, TrainConfig};

pub use crate::mapgen::rasterize_env;

/// Binary top-down view of the operational space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManipObservation {
    p: usize,
    raster: Vec<u8>,
}

impl ManipObservation {
    pub fn new(p: usize, raster: Vec<u8>) -> Result<Self> {
        if raster.len() != p * p {
            return Err(Error::InvalidConfig(format!(
                "raster holds {} cells, expected {}",
                raster.len(),
                p * p
            )));
        }
        if raster.iter().any(|&v| v > 1) {
            return Err(Error::InvalidConfig("raster values must be 0 or 1".into()));
        }
        Ok(Self { p, raster })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn raster(&self) -> &[u8] {
        &self.raster
    }
}

/// Mapper architecture. The transformer stack mirrors the planner's; the
/// encoder uses 3×3 kernels and pools the P×P observation down to M×M
/// tokens, so P must be a multiple of M.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapperConfig {
    pub p: usize,
    pub m: usize,
    pub d: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub d_fc: usize,
}

impl MapperConfig {
    pub fn with_defaults(p: usize, m: usize) -> Self {
        Self { p, m, d: 64, n_layers: 5, heads: 8, d_fc: 512 }
    }

    /// Small configuration for gradient checks.
    pub fn tiny(p: usize, m: usize) -> Self {
        Self { p, m, d: 8, n_layers: 2, heads: 2, d_fc: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.p == 0 || self.p % self.m != 0 {
            return Err(Error::InvalidConfig(format!(
                "observation size {} must be a positive multiple of map size {}",
                self.p, self.m
            )));
        }
        if self.d == 0 || self.n_layers == 0 || self.heads == 0 || self.d_fc == 0 {
            return Err(Error::InvalidConfig(format!("all dimensions must be positive: {self:?}")));
        }
        if self.d % self.heads != 0 || self.d % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "embedding size {} must be even and divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    fn pool(&self) -> usize {
        self.p / self.m
    }
}

struct MapperIds {
    enc_w1: ParamId,
    enc_b1: ParamId,
    enc_w2: ParamId,
    enc_b2: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// Raster-to-occupancy model; outputs obstacle probabilities in (0, 1).
pub struct MapperModel<T: Scalar> {
    pub config: MapperConfig,
    pub params: ParamSet<T>,
    trunk: Trunk,
    ids: MapperIds,
    pe_tokens: Tensor<T>,
}

impl<T: Scalar> MapperModel<T> {
    pub fn new(config: MapperConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d;
        let ids = MapperIds {
            enc_w1: params.add("mapper.enc.w1", uniform_init(&mut rng, &[d, 1, 3, 3], 9))?,
            enc_b1: params.add("mapper.enc.b1", Tensor::zeros(&[d]))?,
            enc_w2: params.add("mapper.enc.w2", uniform_init(&mut rng, &[d, d, 3, 3], 9 * d))?,
            enc_b2: params.add("mapper.enc.b2", Tensor::zeros(&[d]))?,
            dec_w: params.add("mapper.dec.w", uniform_init(&mut rng, &[d, 1], d))?,
            dec_b: params.add("mapper.dec.b", Tensor::zeros(&[1]))?,
        };
        let trunk = Trunk::register(
            &mut params,
            "mapper",
            d,
            config.n_layers,
            config.heads,
            config.d_fc,
            &mut rng,
        )?;
        let pe_tokens = positional_encoding_tokens(config.m, d)?;
        Ok(Self { config, params, trunk, ids, pe_tokens })
    }

    pub fn from_params(config: MapperConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let lookup = |name: &str| {
            params.id(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let ids = MapperIds {
            enc_w1: lookup("mapper.enc.w1")?,
            enc_b1: lookup("mapper.enc.b1")?,
            enc_w2: lookup("mapper.enc.w2")?,
            enc_b2: lookup("mapper.enc.b2")?,
            dec_w: lookup("mapper.dec.w")?,
            dec_b: lookup("mapper.dec.b")?,
        };
        let trunk = Trunk::resolve(
            &params,
            "mapper",
            config.d,
            config.n_layers,
            config.heads,
            config.d_fc,
        )?;
        let pe_tokens = positional_encoding_tokens(config.m, config.d)?;
        Ok(Self { config, params, trunk, ids, pe_tokens })
    }

    /// Architecture from checkpoint shapes; P recovers from the caller.
    pub fn config_from_params(params: &ParamSet<T>, p: usize, m: usize) -> Result<MapperConfig> {
        let w1 = params
            .id("mapper.enc.w1")
            .ok_or_else(|| Error::Checkpoint("missing tensor mapper.enc.w1".into()))?;
        let d = params.value(w1).shape()[0];
        let mut n_layers = 0;
        while params.id(&format!("mapper.layer{n_layers}.ln1.gain")).is_some() {
            n_layers += 1;
        }
        let mut heads = 0;
        while params.id(&format!("mapper.layer0.head{heads}.wq")).is_some() {
            heads += 1;
        }
        let fc1 = params
            .id("mapper.layer0.fc1.w")
            .ok_or_else(|| Error::Checkpoint("missing tensor mapper.layer0.fc1.w".into()))?;
        let d_fc = params.value(fc1).shape()[1];
        let config = MapperConfig { p, m, d, n_layers, heads, d_fc };
        config.validate()?;
        Ok(config)
    }

    /// (B,1,P,P) observation → (B,M,M) obstacle probabilities.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        obs: Var,
        batch: usize,
    ) -> Result<Var> {
        let (p, m, d) = (self.config.p, self.config.m, self.config.d);
        let s = m * m;
        let shape = g.value(obs).shape().to_vec();
        if shape != [batch, 1, p, p] {
            return Err(Error::ShapeMismatch {
                op: "mapper_forward",
                lhs: shape,
                rhs: vec![batch, 1, p, p],
            });
        }
        let h = g.conv2d(
            obs,
            binding.var(self.ids.enc_w1),
            Some(binding.var(self.ids.enc_b1)),
            1,
            1,
            PadMode::Zero,
        )?;
        let h = g.relu(h);
        let h = g.avg_pool(h, self.config.pool())?;
        let h = g.conv2d(
            h,
            binding.var(self.ids.enc_w2),
            Some(binding.var(self.ids.enc_b2)),
            1,
            1,
            PadMode::Zero,
        )?;
        let h = g.relu(h); // (B,d,M,M)
        let h = g.reshape(h, &[batch, d, s])?;
        let tokens = g.swap_last2(h)?;
        let tokens = g.reshape(tokens, &[batch * s, d])?;
        let pe = {
            let mut data = Vec::with_capacity(batch * s * d);
            for _ in 0..batch {
                data.extend_from_slice(self.pe_tokens.data());
            }
            Tensor::from_vec(&[batch * s, d], data)?
        };
        let pe = g.constant(pe);
        let z = g.add(tokens, pe)?;
        let (out, _) = self.trunk.apply(g, binding, z, batch, s)?;
        let logits = g.matmul(out, binding.var(self.ids.dec_w))?;
        let logits = g.add_bias(logits, binding.var(self.ids.dec_b))?;
        let probs = g.sigmoid(logits);
        g.reshape(probs, &[batch, m, m])
    }

    pub fn input_tensor(&self, observations: &[&ManipObservation]) -> Result<Tensor<T>> {
        let p = self.config.p;
        let b = observations.len();
        let mut data = Vec::with_capacity(b * p * p);
        for obs in observations {
            if obs.p != p {
                return Err(Error::ShapeMismatch {
                    op: "mapper input",
                    lhs: vec![obs.p, obs.p],
                    rhs: vec![p, p],
                });
            }
            data.extend(obs.raster.iter().map(|&v| T::of_f64(v as f64)));
        }
        Tensor::from_vec(&[b, 1, p, p], data)
    }

    /// Single-observation map prediction.
    pub fn predict(&self, obs: &ManipObservation) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let binding = self.params.bind(&mut g, false);
        let x = g.constant(self.input_tensor(&[obs])?);
        let out = self.forward(&mut g, &binding, x, 1)?;
        Ok(g.value(out).data().iter().map(|v| v.as_f64() as f32).collect())
    }
}

/// Mapper plus frozen planner. The planner must be pretrained on toroidal
/// synthetic maps of the same M.
pub struct E2eModel<T: Scalar> {
    pub mapper: MapperModel<T>,
    pub planner: SptModel<T>,
}

impl<T: Scalar> E2eModel<T> {
    pub fn new(mapper: MapperModel<T>, planner: SptModel<T>) -> Result<Self> {
        if mapper.config.m != planner.config.m {
            return Err(Error::ShapeMismatch {
                op: "e2e",
                lhs: vec![mapper.config.m],
                rhs: vec![planner.config.m],
            });
        }
        Ok(Self { mapper, planner })
    }

    /// Composed forward pass: observation → predicted map → predicted
    /// distances. Returns both the map probabilities node and the distance
    /// node. Gradients flow through the planner into the mapper; the
    /// planner leaves are bound frozen, so its parameters receive none.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        mapper_binding: &Binding,
        planner_binding: &Binding,
        obs: Var,
        goal_planes: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let m = self.mapper.config.m;
        let m_hat = self.mapper.forward(g, mapper_binding, obs, batch)?; // (B,M,M)
        let m_plane = g.reshape(m_hat, &[batch, 1, m, m])?;
        let planner_input = g.concat(&[m_plane, goal_planes], 1)?; // (B,2,M,M)
        let y_hat = self.planner.forward(g, planner_binding, planner_input, batch)?;
        Ok((m_hat, y_hat))
    }

    pub fn goal_planes(&self, goals: &[GoalSpec]) -> Result<Tensor<T>> {
        let m = self.mapper.config.m;
        let mut data = Vec::with_capacity(goals.len() * m * m);
        for goal in goals {
            data.extend(goal_onehot(*goal, m)?.iter().map(|&v| T::of_f64(v as f64)));
        }
        Tensor::from_vec(&[goals.len(), 1, m, m], data)
    }

    /// Batched inference: predicted maps and distance fields.
    pub fn predict_batch(
        &self,
        observations: &[&ManipObservation],
        goals: &[GoalSpec],
    ) -> Result<Vec<(Vec<f32>, DistanceField)>> {
        let b = observations.len();
        let m = self.mapper.config.m;
        let mut g = Graph::new();
        let mb = self.mapper.params.bind(&mut g, false);
        let pb = self.planner.params.bind(&mut g, false);
        let obs = g.constant(self.mapper.input_tensor(observations)?);
        let goal_planes = g.constant(self.goal_planes(goals)?);
        let (m_hat, y_hat) = self.forward(&mut g, &mb, &pb, obs, goal_planes, b)?;
        let maps = g.value(m_hat).data();
        let dists = g.value(y_hat).data();
        (0..b)
            .map(|i| {
                let probs: Vec<f32> =
                    maps[i * m * m..(i + 1) * m * m].iter().map(|v| v.as_f64() as f32).collect();
                let field = DistanceField::from_prediction(
                    m,
                    dists[i * m * m..(i + 1) * m * m]
                        .iter()
                        .map(|v| v.as_f64() as f32)
                        .collect(),
                )?;
                Ok((probs, field))
            })
            .collect()
    }
}

/// One manipulation training example: the observation, and the planning
/// instance it must solve (whose map is used for metrics only).
pub struct E2eExample {
    pub observation: ManipObservation,
    pub instance: PlanningInstance,
}

/// Validation-set accuracies of the composed model.
pub fn evaluate_e2e(model: &E2eModel<f32>, examples: &[E2eExample]) -> Result<E2eAccuracy> {
    let results: Vec<Result<(f64, u64, u64)>> = examples
        .par_chunks(8)
        .map(|chunk| {
            let obs: Vec<&ManipObservation> = chunk.iter().map(|e| &e.observation).collect();
            let goals: Vec<GoalSpec> = chunk.iter().map(|e| e.instance.goal).collect();
            let preds = model.predict_batch(&obs, &goals)?;
            let mut map_acc_sum = 0.0;
            let mut correct = 0u64;
            let mut counted = 0u64;
            for ((probs, field), ex) in preds.iter().zip(chunk.iter()) {
                map_acc_sum += map_accuracy(probs, &ex.instance.map)?;
                let optimal = optimal_actions(&ex.instance.gt, &ex.instance.map);
                let (c, n) = action_accuracy_counts(field, &ex.instance, &optimal)?;
                correct += c;
                counted += n;
            }
            Ok((map_acc_sum, correct, counted))
        })
        .collect();
    let mut map_acc_sum = 0.0;
    let mut correct = 0u64;
    let mut counted = 0u64;
    for r in results {
        let (m, c, n) = r?;
        map_acc_sum += m;
        correct += c;
        counted += n;
    }
    if counted == 0 {
        return Err(Error::Contract("e2e evaluation has no counted cells".into()));
    }
    Ok(E2eAccuracy {
        map_acc: map_acc_sum / examples.len() as f64,
        plan_acc: correct as f64 / counted as f64,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct E2eAccuracy {
    pub map_acc: f64,
    pub plan_acc: f64,
}

#[derive(Debug, Clone)]
pub struct E2eTrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_plan_acc: f64,
    pub final_accuracy: E2eAccuracy,
}

/// Trains the mapper through the frozen planner on distance supervision
/// alone. The planner's parameters are bound as constants in every graph
/// and never updated; the caller can byte-compare its checkpoint before and
/// after as proof.
pub fn train_mapper(
    model: &mut E2eModel<f32>,
    train_set: &[E2eExample],
    val_set: &[E2eExample],
    config: &TrainConfig,
    supervision: &SupervisionSpec,
    mut on_metrics: impl FnMut(&EpochMetrics),
) -> Result<E2eTrainOutcome> {
    config.validate()?;
    supervision.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidConfig("train and validation sets must be nonempty".into()));
    }
    let m = model.mapper.config.m;

    struct PreparedE2e {
        target: Vec<f32>,
        mask: Vec<f32>,
        mask_sum: f64,
    }
    let prepared: Vec<PreparedE2e> = train_set
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = stream(config.seed, i as u64, tag::SUPERVISION);
            let (target, mask) =
                crate::train::build_supervision(&ex.instance, supervision, &mut rng)?;
            let mask_sum = mask.iter().map(|&v| v as f64).sum();
            Ok(PreparedE2e { target, mask, mask_sum })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = Vec::new();
    let mut best_plan_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Option<Vec<Tensor<f32>>> = None;
    let mut velocity: Vec<Tensor<f32>> = if config.sgd.momentum > 0.0 {
        model.mapper.params.snapshot_values().iter().map(|t| Tensor::zeros(t.shape())).collect()
    } else {
        Vec::new()
    };
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let lr = decay_lr(&config.sgd, epoch);
        let epoch_start = Instant::now();
        let mut shuffle_rng = stream(config.seed, epoch as u64, tag::SHUFFLE);
        use rand::seq::SliceRandom;
        indices.shuffle(&mut shuffle_rng);

        let mut epoch_sse = 0.0f64;
        let mut epoch_mask = 0.0f64;
        for (batch_idx, batch) in indices.chunks(config.batch_size).enumerate() {
            let total_mask: f64 = batch.iter().map(|&i| prepared[i].mask_sum).sum();
            if total_mask <= 0.0 {
                return Err(Error::Contract("batch has an all-zero supervision mask".into()));
            }
            let chunk_results: Vec<Result<(f64, crate::autodiff::GradExport<f32>)>> = batch
                .par_chunks(config.chunk_size)
                .map(|chunk| {
                    let b = chunk.len();
                    let obs: Vec<&ManipObservation> =
                        chunk.iter().map(|&i| &train_set[i].observation).collect();
                    let goals: Vec<GoalSpec> =
                        chunk.iter().map(|&i| train_set[i].instance.goal).collect();
                    let mut target = Vec::with_capacity(b * m * m);
                    let mut mask = Vec::with_capacity(b * m * m);
                    for &i in chunk {
                        target.extend_from_slice(&prepared[i].target);
                        mask.extend_from_slice(&prepared[i].mask);
                    }
                    let mut g = Graph::<f32>::new();
                    let mb = model.mapper.params.bind(&mut g, true);
                    let pb = model.planner.params.bind(&mut g, false);
                    let x = g.constant(model.mapper.input_tensor(&obs)?);
                    let goal_planes = g.constant(model.goal_planes(&goals)?);
                    let (_, y_hat) = model.forward(&mut g, &mb, &pb, x, goal_planes, b)?;
                    let t = g.constant(Tensor::from_vec(&[b, m, m], target)?);
                    let mk = g.constant(Tensor::from_vec(&[b, m, m], mask)?);
                    let sse = g.masked_sse(y_hat, t, mk)?;
                    g.backward(sse)?;
                    let export = model.mapper.params.export_grads(&g, &mb);
                    Ok((g.value(sse).item() as f64, export))
                })
                .collect();

            let mut batch_sse = 0.0f64;
            let scale = (1.0 / total_mask) as f32;
            for r in chunk_results {
                let (sse, export) = r?;
                batch_sse += sse;
                model.mapper.params.accumulate(&export, scale);
            }
            let batch_loss = batch_sse / total_mask;
            if !batch_loss.is_finite() {
                return Err(Error::NanLoss { epoch, batch: batch_idx, lr });
            }
            if let Some(cap) = config.clip_norm {
                clip_norm(&mut model.mapper.params, cap);
            }
            if config.sgd.momentum > 0.0 {
                sgd_step_momentum(&mut model.mapper.params, &mut velocity, config.sgd.momentum, lr);
            } else {
                sgd_step(&mut model.mapper.params, lr);
            }
            epoch_sse += batch_sse;
            epoch_mask += total_mask;
        }

        let train_row = EpochMetrics {
            epoch,
            split: "train".into(),
            loss: epoch_sse / epoch_mask,
            action_acc: None,
            map_acc: None,
            lr,
            wall_ms: epoch_start.elapsed().as_millis() as u64,
        };
        on_metrics(&train_row);
        metrics.push(train_row);

        if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs {
            let val_start = Instant::now();
            let acc = evaluate_e2e(model, val_set)?;
            let val_row = EpochMetrics {
                epoch,
                split: "val".into(),
                loss: f64::NAN,
                action_acc: Some(acc.plan_acc),
                map_acc: Some(acc.map_acc),
                lr,
                wall_ms: val_start.elapsed().as_millis() as u64,
            };
            // Validation loss is not separately computed for the composed
            // model; plan accuracy is the selection signal.
            let mut val_row = val_row;
            val_row.loss = 0.0;
            on_metrics(&val_row);
            metrics.push(val_row);
            if acc.plan_acc > best_plan_acc {
                best_plan_acc = acc.plan_acc;
                best_epoch = epoch;
                best_params = Some(model.mapper.params.snapshot_values());
            }
        }
    }

    if let Some(best) = best_params {
        model.mapper.params.restore_values(&best)?;
    }
    let final_accuracy = evaluate_e2e(model, val_set)?;
    Ok(E2eTrainOutcome { metrics, best_epoch, best_plan_acc, final_accuracy })
}

fn clip_norm(params: &mut ParamSet<f32>, cap: f64) {
    let mut sq = 0.0f64;
    for i in 0..params.len() {
        let id = ParamId::from_index(i);
        sq += params.grad(id).data().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > cap {
        let scale = (cap / norm) as f32;
        for i in 0..params.len() {
            let id = ParamId::from_index(i);
            for g in params.grad_mut(id).data_mut() {
                *g *= scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridMap, Topology};
    use crate::mapgen::{config_space, gen_manip_env, ManipGenSpec, OperationalSpace};
    use crate::oracle::dijkstra_field;
    use crate::spt::SPTConfig;

    fn tiny_e2e(p: usize, m: usize) -> E2eModel<f32> {
        let mapper = MapperModel::new(MapperConfig::tiny(p, m), 3).unwrap();
        let planner = SptModel::new(SPTConfig::tiny(m), 4).unwrap();
        E2eModel::new(mapper, planner).unwrap()
    }

    fn example(p: usize, m: usize, seed: u64, index: u64) -> E2eExample {
        let spec = ManipGenSpec::new(p, m, seed);
        let env = gen_manip_env(&spec, index).unwrap();
        let map = config_space(&env, m).unwrap();
        let raster = rasterize_env(&env, p);
        let free = map.free_cells();
        let goal_cell = free[(index as usize) % free.len()];
        let goal = GoalSpec::new(goal_cell.0, goal_cell.1);
        let gt = dijkstra_field(&map, goal).unwrap();
        E2eExample {
            observation: ManipObservation::new(p, raster).unwrap(),
            instance: PlanningInstance::new(map, goal, gt).unwrap(),
        }
    }

    #[test]
    fn raster_matches_circle_area() {
        // Largest generator-valid circle that fits the image: D = 0.3P,
        // radius 0.15P. Raster count within 5% of the disc area.
        let p = 90usize;
        let pf = p as f64;
        let circle = crate::mapgen::Circle {
            center: (pf / 2.0 + 0.3 * pf, pf / 2.0),
            radius: 0.15 * pf,
            dist_from_center: 0.3 * pf,
        };
        let env = OperationalSpace::new(p, vec![circle]).unwrap();
        let raster = rasterize_env(&env, p);
        let count = raster.iter().filter(|&&v| v == 1).count() as f64;
        let area = std::f64::consts::PI * (0.15 * pf) * (0.15 * pf);
        assert!((count - area).abs() / area < 0.05, "count {count} vs area {area}");

        // Zero circles → all-zero raster; deterministic.
        let empty = OperationalSpace::new(p, vec![]).unwrap();
        assert!(rasterize_env(&empty, p).iter().all(|&v| v == 0));
        assert_eq!(rasterize_env(&env, p), rasterize_env(&env, p));
    }

    #[test]
    fn mapper_outputs_probabilities() {
        let model = tiny_e2e(10, 5);
        let obs = ManipObservation::new(10, vec![0; 100]).unwrap();
        let probs = model.mapper.predict(&obs).unwrap();
        assert_eq!(probs.len(), 25);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn perfect_map_reproduces_planner_prediction() {
        // Feeding the planner a binary map through the composed graph gives
        // the same result as running the planner alone on that map.
        let m = 6;
        let model = tiny_e2e(12, m);
        let map = GridMap::new(
            m,
            {
                let mut c = vec![0u8; m * m];
                c[7] = 1;
                c[14] = 1;
                c
            },
            Topology::Toroidal,
        )
        .unwrap();
        let goal = GoalSpec::new(4, 4);
        let direct = model.planner.predict(&map, goal).unwrap();

        let mut g = Graph::<f32>::new();
        let pb = model.planner.params.bind(&mut g, false);
        let m_hat = g.constant(
            Tensor::from_f32(&[1, 1, m, m], &map.cells().iter().map(|&c| c as f32).collect::<Vec<_>>())
                .unwrap(),
        );
        let goal_planes = g.constant(model.goal_planes(&[goal]).unwrap());
        let x = g.concat(&[m_hat, goal_planes], 1).unwrap();
        let composed = model.planner.forward(&mut g, &pb, x, 1).unwrap();
        let composed_values: Vec<f32> =
            g.value(composed).data().iter().map(|&v| v).collect();
        assert_eq!(composed_values, direct.values());
    }

    #[test]
    fn mapper_gets_gradient_planner_stays_frozen() {
        let m = 5;
        let model = tiny_e2e(10, m);
        let ex = example(60, m, 7, 1);
        // Raster resolution for the tiny mapper is 10.
        let raster10 = {
            let spec = ManipGenSpec::new(60, m, 7);
            let env = gen_manip_env(&spec, 1).unwrap();
            rasterize_env(&env, 10)
        };
        let obs = ManipObservation::new(10, raster10).unwrap();

        let mut g = Graph::<f32>::new();
        let mb = model.mapper.params.bind(&mut g, true);
        let pb = model.planner.params.bind(&mut g, false);
        let x = g.constant(model.mapper.input_tensor(&[&obs]).unwrap());
        let goal_planes = g.constant(model.goal_planes(&[ex.instance.goal]).unwrap());
        let (_, y_hat) = model.forward(&mut g, &mb, &pb, x, goal_planes, 1).unwrap();
        let t = g.constant(Tensor::from_f32(&[1, m, m], ex.instance.gt.values()).unwrap());
        let mk = g.constant(Tensor::full(&[1, m, m], 1.0));
        let loss = g.masked_mse(y_hat, t, mk).unwrap();
        g.backward(loss).unwrap();

        // Mapper gradients are nonzero; planner leaves carry none.
        let export = model.mapper.params.export_grads(&g, &mb);
        let mut mapper_params = MapperModel::<f32>::new(MapperConfig::tiny(10, m), 3).unwrap();
        mapper_params.params.accumulate(&export, 1.0);
        let any_nonzero = (0..mapper_params.params.len()).any(|i| {
            mapper_params
                .params
                .grad(ParamId::from_index(i))
                .data()
                .iter()
                .any(|&v| v != 0.0)
        });
        assert!(any_nonzero, "mapper gradient should be nonzero");
        for var in &pb.vars {
            assert!(g.grad(*var).is_none(), "planner leaf received a gradient");
        }
    }

    #[test]
    fn loss_is_independent_of_the_true_map() {
        // Zero map supervision: the training loss reads only predicted
        // distances and distance targets, so replacing the true occupancy
        // map (used by metrics alone) cannot change the loss.
        let m = 5;
        let model = tiny_e2e(10, m);
        let obs = ManipObservation::new(10, {
            let mut r = vec![0u8; 100];
            r[33] = 1;
            r[34] = 1;
            r
        })
        .unwrap();
        let goal = GoalSpec::new(1, 2);
        let target = Tensor::from_f32(&[1, m, m], &vec![2.0f32; m * m]).unwrap();

        let loss_value = |_unused_map_cells: &[u8]| -> f32 {
            let mut g = Graph::<f32>::new();
            let mb = model.mapper.params.bind(&mut g, true);
            let pb = model.planner.params.bind(&mut g, false);
            let x = g.constant(model.mapper.input_tensor(&[&obs]).unwrap());
            let goal_planes = g.constant(model.goal_planes(&[goal]).unwrap());
            let (_, y_hat) = model.forward(&mut g, &mb, &pb, x, goal_planes, 1).unwrap();
            let t = g.constant(target.clone());
            let mk = g.constant(Tensor::full(&[1, m, m], 1.0));
            let loss = g.masked_mse(y_hat, t, mk).unwrap();
            g.value(loss).item()
        };
        let a = loss_value(&vec![0u8; m * m]);
        let b = loss_value(&vec![1u8; m * m]);
        assert_eq!(a, b);
    }

    #[test]
    fn mapper_gradcheck_tiny() {
        use crate::autodiff::grad_check;
        // Gradient through the composed model w.r.t. the observation input,
        // at a generic (continuous) point.
        let m = 5;
        let p = 10;
        let mapper = MapperModel::<f64>::new(MapperConfig::tiny(p, m), 3).unwrap();
        let planner = SptModel::<f64>::new(SPTConfig::tiny(m), 4).unwrap();
        let model = E2eModel::new(mapper, planner).unwrap();
        let mut x_data = vec![0.0f64; p * p];
        let mut s = 12345u64;
        for v in x_data.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
        }
        let x = Tensor::from_vec(&[1, 1, p, p], x_data).unwrap();
        let goal = GoalSpec::new(2, 2);
        let err = grad_check(
            |g, v| {
                let mb = model.mapper.params.bind(g, false);
                let pb = model.planner.params.bind(g, false);
                let goal_planes = g.constant(model.goal_planes(&[goal])?);
                let (_, y_hat) = model.forward(g, &mb, &pb, v, goal_planes, 1)?;
                let t = g.constant(Tensor::full(&[1, m, m], 2.0));
                let mk = g.constant(Tensor::full(&[1, m, m], 1.0));
                g.masked_mse(y_hat, t, mk)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
