//! Metrics and measurement: greedy-action accuracy, occupancy-map accuracy,
//! error-versus-distance curves, single-threaded runtime benchmarking, and
//! attention-weight export. All model evaluation paths share this code.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Graph, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::grid::{Action, DistanceField, GoalSpec, GridMap, PlanningInstance};
use crate::mapgen::{gen_nav_map, NavGenSpec};
use crate::oracle::{astar, dijkstra_field, optimal_actions, OptimalActionSet};
use crate::rng::{stream, tag};
use crate::spt::SptModel;
use crate::vin::VinModel;

/// A trained planner of either family, evaluated through one shared path.
pub enum PlannerModel<T: Scalar> {
    Spt(SptModel<T>),
    Vin(VinModel<T>),
}

impl<T: Scalar> PlannerModel<T> {
    pub fn predict(&self, map: &GridMap, goal: GoalSpec) -> Result<DistanceField> {
        match self {
            PlannerModel::Spt(m) => m.predict(map, goal),
            PlannerModel::Vin(m) => m.predict(map, goal),
        }
    }

    /// Batched inference for one homogeneous chunk of instances.
    pub fn predict_batch(&self, chunk: &[(&GridMap, GoalSpec)]) -> Result<Vec<DistanceField>> {
        if chunk.is_empty() {
            return Ok(Vec::new());
        }
        let m = chunk[0].0.size();
        let topology = chunk[0].0.topology();
        let b = chunk.len();
        let mut data = Vec::with_capacity(b * 2 * m * m);
        for (map, goal) in chunk {
            let planes = SptModel::<T>::input_planes(map, *goal)?;
            data.extend_from_slice(planes.data());
        }
        let input = Tensor::from_vec(&[b, 2, m, m], data)?;
        let mut g = Graph::new();
        let pred = match self {
            PlannerModel::Spt(model) => {
                let binding = model.params.bind(&mut g, false);
                let x = g.constant(input);
                model.forward(&mut g, &binding, x, b)?
            }
            PlannerModel::Vin(model) => {
                let binding = model.params.bind(&mut g, false);
                let x = g.constant(input);
                model.forward(&mut g, &binding, x, b, topology)?
            }
        };
        let out = g.value(pred).data();
        (0..b)
            .map(|i| {
                let values =
                    out[i * m * m..(i + 1) * m * m].iter().map(|v| v.as_f64() as f32).collect();
                DistanceField::from_prediction(m, values)
            })
            .collect()
    }
}

/// Greedy action implied by a predicted field at `cell`: the canonical-order
/// argmin over the four neighbor predictions, with nonexistent and obstacle
/// neighbors treated as +∞.
pub fn greedy_action(pred: &DistanceField, map: &GridMap, cell: (usize, usize)) -> Result<Action> {
    let neighbors = map.neighbors(cell)?;
    let mut best = f64::INFINITY;
    let mut best_action = Action::North;
    for (action, n) in neighbors.iter() {
        let value = match n {
            Some(n) if map.is_free(*n) => pred.get(*n) as f64,
            _ => f64::INFINITY,
        };
        if value < best {
            best = value;
            best_action = *action;
        }
    }
    if best.is_infinite() {
        // No admissible neighbor at all; canonical first action stands.
        return Ok(Action::North);
    }
    Ok(best_action)
}

/// Correct/counted action decisions for one instance. Counted cells are
/// free, reachable, and not the goal; a decision is correct when the greedy
/// action is one of the ground-truth optimal actions.
pub fn action_accuracy_counts(
    pred: &DistanceField,
    instance: &PlanningInstance,
    optimal: &OptimalActionSet,
) -> Result<(u64, u64)> {
    let m = instance.size();
    let map = &instance.map;
    let mut correct = 0u64;
    let mut counted = 0u64;
    for r in 0..m {
        for c in 0..m {
            if map.is_obstacle((r, c)) || instance.gt.get((r, c)) <= 0.0 {
                continue;
            }
            counted += 1;
            let action = greedy_action(pred, map, (r, c))?;
            if optimal.contains((r, c), action) {
                correct += 1;
            }
        }
    }
    Ok((correct, counted))
}

/// Fraction of counted cells whose greedy action is optimal.
pub fn action_accuracy(pred: &DistanceField, instance: &PlanningInstance) -> Result<f64> {
    let optimal = optimal_actions(&instance.gt, &instance.map);
    let (correct, counted) = action_accuracy_counts(pred, instance, &optimal)?;
    if counted == 0 {
        return Err(Error::Contract(
            "action_accuracy needs at least one reachable non-goal free cell".into(),
        ));
    }
    Ok(correct as f64 / counted as f64)
}

/// Pooled action accuracy over a dataset: total correct over total counted
/// cells, evaluated in parallel with a deterministic reduction order.
pub fn dataset_action_accuracy<T: Scalar>(
    model: &PlannerModel<T>,
    instances: &[PlanningInstance],
    chunk_size: usize,
) -> Result<f64> {
    let counts: Vec<Result<(u64, u64)>> = instances
        .par_chunks(chunk_size.max(1))
        .map(|chunk| {
            let refs: Vec<(&GridMap, GoalSpec)> =
                chunk.iter().map(|inst| (&inst.map, inst.goal)).collect();
            let preds = model.predict_batch(&refs)?;
            let mut correct = 0u64;
            let mut counted = 0u64;
            for (pred, inst) in preds.iter().zip(chunk.iter()) {
                let optimal = optimal_actions(&inst.gt, &inst.map);
                let (c, n) = action_accuracy_counts(pred, inst, &optimal)?;
                correct += c;
                counted += n;
            }
            Ok((correct, counted))
        })
        .collect();
    let mut correct = 0u64;
    let mut counted = 0u64;
    for r in counts {
        let (c, n) = r?;
        correct += c;
        counted += n;
    }
    if counted == 0 {
        return Err(Error::Contract("dataset has no counted cells".into()));
    }
    Ok(correct as f64 / counted as f64)
}

/// Batched predictions over a whole dataset, parallel across chunks.
pub fn predict_dataset<T: Scalar>(
    model: &PlannerModel<T>,
    instances: &[PlanningInstance],
    chunk_size: usize,
) -> Result<Vec<DistanceField>> {
    let chunks: Vec<Result<Vec<DistanceField>>> = instances
        .par_chunks(chunk_size.max(1))
        .map(|chunk| {
            let refs: Vec<(&GridMap, GoalSpec)> =
                chunk.iter().map(|inst| (&inst.map, inst.goal)).collect();
            model.predict_batch(&refs)
        })
        .collect();
    let mut out = Vec::with_capacity(instances.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Pooled action accuracy from precomputed predictions.
pub fn pooled_action_accuracy(
    preds: &[DistanceField],
    instances: &[PlanningInstance],
) -> Result<f64> {
    if preds.len() != instances.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} instances",
            preds.len(),
            instances.len()
        )));
    }
    let mut correct = 0u64;
    let mut counted = 0u64;
    for (pred, inst) in preds.iter().zip(instances.iter()) {
        let optimal = optimal_actions(&inst.gt, &inst.map);
        let (c, n) = action_accuracy_counts(pred, inst, &optimal)?;
        correct += c;
        counted += n;
    }
    if counted == 0 {
        return Err(Error::Contract("dataset has no counted cells".into()));
    }
    Ok(correct as f64 / counted as f64)
}

/// Cellwise match fraction between a probability map and a binary map,
/// thresholding at 0.5 (≥ 0.5 means obstacle). Probabilities must lie in
/// [0, 1].
pub fn map_accuracy(pred_probs: &[f32], gt_map: &GridMap) -> Result<f64> {
    let m = gt_map.size();
    if pred_probs.len() != m * m {
        return Err(Error::ShapeMismatch {
            op: "map_accuracy",
            lhs: vec![pred_probs.len()],
            rhs: vec![m * m],
        });
    }
    let mut matches = 0usize;
    for (i, &p) in pred_probs.iter().enumerate() {
        let predicted_obstacle = p >= 0.5;
        let is_obstacle = gt_map.cells()[i] == 1;
        if predicted_obstacle == is_obstacle {
            matches += 1;
        }
    }
    Ok(matches as f64 / (m * m) as f64)
}

/// One row of the error-versus-distance curve.
#[derive(Debug, Clone, Serialize)]
pub struct MseBin {
    pub distance: u32,
    pub mse: f64,
    pub count: u64,
}

/// Buckets squared prediction errors of reachable free cells by their
/// integer ground-truth distance.
pub fn mse_by_distance(
    preds: &[DistanceField],
    instances: &[PlanningInstance],
) -> Result<Vec<MseBin>> {
    if preds.is_empty() || preds.len() != instances.len() {
        return Err(Error::Contract(format!(
            "mse_by_distance: got {} predictions for {} instances",
            preds.len(),
            instances.len()
        )));
    }
    let mut sums: Vec<(f64, u64)> = Vec::new();
    for (pred, inst) in preds.iter().zip(instances.iter()) {
        let m = inst.size();
        for r in 0..m {
            for c in 0..m {
                if inst.map.is_obstacle((r, c)) {
                    continue;
                }
                let gt = inst.gt.get((r, c));
                if gt < 0.0 {
                    continue;
                }
                let d = gt as usize;
                if sums.len() <= d {
                    sums.resize(d + 1, (0.0, 0));
                }
                let err = (pred.get((r, c)) - gt) as f64;
                sums[d].0 += err * err;
                sums[d].1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(d, (s, n))| MseBin { distance: d as u32, mse: s / n as f64, count: n })
        .collect())
}

/// Benchmarkable planning methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMethod {
    Dijkstra,
    Astar,
    Spt,
}

impl BenchMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dijkstra" => Ok(Self::Dijkstra),
            "astar" => Ok(Self::Astar),
            "spt" => Ok(Self::Spt),
            other => Err(Error::InvalidConfig(format!("unknown bench method {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchCell {
    pub method: BenchMethod,
    pub m: usize,
    pub ms_per_map: f64,
    pub maps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    /// ms(M=max)/ms(M=min) per method, when at least two sizes ran.
    pub scaling_ratios: Vec<(BenchMethod, f64)>,
}

impl BenchReport {
    pub fn ms(&self, method: BenchMethod, m: usize) -> Option<f64> {
        self.cells.iter().find(|c| c.method == method && c.m == m).map(|c| c.ms_per_map)
    }
}

/// Wall-clock per-map averages on freshly generated maps, single-threaded,
/// warmup excluded. The transformer rows reuse `spt_params` when given
/// (timing does not depend on the weight values, only the shapes).
pub fn runtime_bench(
    methods: &[BenchMethod],
    sizes: &[usize],
    count: usize,
    seed: u64,
    spt_params: Option<&ParamSet<f32>>,
) -> Result<BenchReport> {
    let mut cells = Vec::new();
    for &m in sizes {
        let spec = NavGenSpec::new(m, seed);
        let mut maps = Vec::with_capacity(count);
        for i in 0..count {
            let map = gen_nav_map(&spec, i as u64)?;
            let free = map.free_cells();
            let mut goal_rng = stream(seed, i as u64, tag::GOAL);
            let goal_cell = free[goal_rng.gen_range(0..free.len())];
            let start_cell = free[goal_rng.gen_range(0..free.len())];
            maps.push((map, GoalSpec::new(goal_cell.0, goal_cell.1), start_cell));
        }
        let warmup = (count / 10).clamp(1, 50);
        for &method in methods {
            let ms = match method {
                BenchMethod::Dijkstra => {
                    for (map, goal, _) in maps.iter().take(warmup) {
                        let _ = dijkstra_field(map, *goal)?;
                    }
                    let t = Instant::now();
                    for (map, goal, _) in &maps {
                        let _ = dijkstra_field(map, *goal)?;
                    }
                    t.elapsed().as_secs_f64() * 1000.0 / count as f64
                }
                BenchMethod::Astar => {
                    for (map, goal, start) in maps.iter().take(warmup) {
                        let _ = astar(map, *start, *goal)?;
                    }
                    let t = Instant::now();
                    for (map, goal, start) in &maps {
                        let _ = astar(map, *start, *goal)?;
                    }
                    t.elapsed().as_secs_f64() * 1000.0 / count as f64
                }
                BenchMethod::Spt => {
                    let model = match spt_params {
                        Some(params) => {
                            let config = SptModel::<f32>::config_from_params(params, m)?;
                            SptModel::from_params(config, clone_params(params))?
                        }
                        None => SptModel::<f32>::new(
                            crate::spt::SPTConfig::with_defaults(m),
                            seed,
                        )?,
                    };
                    for (map, goal, _) in maps.iter().take(warmup) {
                        let _ = model.predict(map, *goal)?;
                    }
                    let t = Instant::now();
                    for (map, goal, _) in &maps {
                        let _ = model.predict(map, *goal)?;
                    }
                    t.elapsed().as_secs_f64() * 1000.0 / count as f64
                }
            };
            cells.push(BenchCell { method, m, ms_per_map: ms, maps: count });
        }
    }
    let mut scaling_ratios = Vec::new();
    if sizes.len() >= 2 {
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        for &method in methods {
            let a = cells.iter().find(|c| c.method == method && c.m == lo);
            let b = cells.iter().find(|c| c.method == method && c.m == hi);
            if let (Some(a), Some(b)) = (a, b) {
                scaling_ratios.push((method, b.ms_per_map / a.ms_per_map));
            }
        }
    }
    Ok(BenchReport { cells, scaling_ratios })
}

fn clone_params(params: &ParamSet<f32>) -> ParamSet<f32> {
    let mut out = ParamSet::new();
    for (name, tensor) in params.iter() {
        out.add(name.to_string(), tensor.clone()).expect("unique names");
    }
    out
}

/// Full evaluation report, serialized as JSON by the command-line tool.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    /// Echo of the effective configuration that produced this report.
    pub config: serde_json::Value,
    pub dataset: String,
    pub split: String,
    pub count: usize,
    pub action_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_acc: Option<f64>,
    pub mse_by_distance: Vec<MseBin>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime: Option<BenchReport>,
}

/// Error-versus-distance curve as CSV (header plus one row per bin).
pub fn curve_to_csv(bins: &[MseBin]) -> String {
    let mut out = String::from("distance,mse,count
");
    for b in bins {
        out.push_str(&format!("{},{},{}
", b.distance, b.mse, b.count));
    }
    out
}

/// Runtime table as CSV.
pub fn bench_to_csv(report: &BenchReport) -> String {
    let mut out = String::from("method,m,ms_per_map,maps
");
    for c in &report.cells {
        out.push_str(&format!("{:?},{},{},{}
", c.method, c.m, c.ms_per_map, c.maps));
    }
    out
}

/// Attention weights of one layer/head on one instance: an M²×M² matrix
/// whose row q is the weight distribution of query position q over all key
/// positions; each row reshapes to an M×M map.
pub struct AttentionExport {
    pub m: usize,
    pub layer: usize,
    pub head: usize,
    /// Row-major (M², M²), rows summing to 1.
    pub weights: Vec<f32>,
}

impl AttentionExport {
    /// The M×M attention map of one query position.
    pub fn per_query_map(&self, query: usize) -> Vec<f32> {
        let s = self.m * self.m;
        self.weights[query * s..(query + 1) * s].to_vec()
    }
}

/// Attention matrix as CSV: one row per query position.
pub fn attention_to_csv(export: &AttentionExport) -> String {
    let s = export.m * export.m;
    let mut out = String::from("query");
    for k in 0..s {
        out.push_str(&format!(",k{k}"));
    }
    out.push('\n');
    for q in 0..s {
        out.push_str(&q.to_string());
        for k in 0..s {
            out.push_str(&format!(",{}", export.weights[q * s + k]));
        }
        out.push('\n');
    }
    out
}

pub fn export_attention(
    model: &SptModel<f32>,
    map: &GridMap,
    goal: GoalSpec,
    layer: usize,
    head: usize,
) -> Result<AttentionExport> {
    let trunk = model.trunk();
    if layer >= trunk.layer_count() || head >= trunk.head_count() {
        return Err(Error::Contract(format!(
            "layer {layer}, head {head} out of range ({} layers, {} heads)",
            trunk.layer_count(),
            trunk.head_count()
        )));
    }
    let m = map.size();
    let mut g = Graph::new();
    let binding = model.params.bind(&mut g, false);
    let planes = SptModel::<f32>::input_planes(map, goal)?.reshaped(&[1, 2, m, m])?;
    let x = g.constant(planes);
    let (_, attn) = model.forward_with_attn(&mut g, &binding, x, 1)?;
    let weights_var = attn[layer][head];
    let weights = g.value(weights_var).data().to_vec();
    Ok(AttentionExport { m, layer, head, weights })
}
