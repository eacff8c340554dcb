//! Dataset construction and serialization. Each split directory holds a
//! manifest.json plus flat binary files — maps (one byte per cell), goals
//! (two little-endian u16 per instance), distances (little-endian f32) and,
//! for manipulation tasks, workspace rasters (one byte per cell) — all
//! row-major, instance-major, trivially parseable from any language.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DistanceField, GoalSpec, GridMap, PlanningInstance, Topology};
use crate::mapgen::{gen_manip_instance, gen_nav_map, rasterize_env, ManipGenSpec, NavGenSpec};
use crate::oracle::dijkstra_field;
use crate::rng::{stream, tag};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nav,
    Manip,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum GeneratorSpec {
    Nav(NavGenSpec),
    Manip(ManipGenSpec),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: Task,
    pub m: usize,
    pub topology: Topology,
    /// Name of this split.
    pub split: String,
    /// Instances in this split.
    pub count: usize,
    /// Counts of every split in the dataset.
    pub counts: SplitCounts,
    pub generator: GeneratorSpec,
    /// Raster side length; present for manipulation datasets.
    pub raster_p: Option<usize>,
    pub dtype: String,
    pub version: u32,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported dataset version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        if self.count == 0 {
            return Err(Error::InvalidConfig("split has zero instances".into()));
        }
        if self.dtype != "f32" {
            return Err(Error::InvalidConfig(format!("unsupported dtype {}", self.dtype)));
        }
        Ok(())
    }
}

/// What to build: a generator, split sizes, and (for manipulation) the
/// raster resolution.
#[derive(Debug, Clone, Copy)]
pub struct DatasetSpec {
    pub generator: GeneratorSpec,
    pub counts: SplitCounts,
    /// Raster resolution for manipulation observations (commonly 90).
    pub raster_p: usize,
}

/// One generated example: the planning instance and, for manipulation
/// tasks, the workspace raster.
pub struct GeneratedInstance {
    pub instance: PlanningInstance,
    pub raster: Option<Vec<u8>>,
}

/// Builds the instance at a global index: generate the map, sample a goal
/// uniformly over free cells, compute the ground-truth field.
pub fn generate_instance(spec: &DatasetSpec, index: u64) -> Result<GeneratedInstance> {
    let (map, raster) = match &spec.generator {
        GeneratorSpec::Nav(nav) => (gen_nav_map(nav, index)?, None),
        GeneratorSpec::Manip(manip) => {
            let (env, map) = gen_manip_instance(manip, index)?;
            (map, Some(rasterize_env(&env, spec.raster_p)))
        }
    };
    let seed = match &spec.generator {
        GeneratorSpec::Nav(n) => n.seed,
        GeneratorSpec::Manip(m) => m.seed,
    };
    let free = map.free_cells();
    let mut goal_rng = stream(seed, index, tag::GOAL);
    let goal_cell = free[goal_rng.gen_range(0..free.len())];
    let goal = GoalSpec::new(goal_cell.0, goal_cell.1);
    let gt = dijkstra_field(&map, goal)?;
    Ok(GeneratedInstance { instance: PlanningInstance::new(map, goal, gt)?, raster })
}

/// Generates and writes train/val/test splits under `out_dir`. Instance
/// indices run consecutively across splits, so every instance is a pure
/// function of (seed, index) and the corpus reproduces bit-exactly.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<DatasetManifest>> {
    let (task, m, topology, seed) = match &spec.generator {
        GeneratorSpec::Nav(n) => {
            n.validate()?;
            (Task::Nav, n.m, Topology::Planar, n.seed)
        }
        GeneratorSpec::Manip(mg) => {
            mg.validate()?;
            (Task::Manip, mg.m, Topology::Toroidal, mg.seed)
        }
    };
    let _ = seed;
    if spec.counts.train == 0 || spec.counts.val == 0 || spec.counts.test == 0 {
        return Err(Error::InvalidConfig("all split counts must be positive".into()));
    }
    let splits =
        [("train", 0, spec.counts.train), ("val", spec.counts.train, spec.counts.val), (
            "test",
            spec.counts.train + spec.counts.val,
            spec.counts.test,
        )];
    let mut manifests = Vec::new();
    for (name, base, count) in splits {
        let records: Vec<GeneratedInstance> = (0..count)
            .into_par_iter()
            .map(|i| generate_instance(spec, (base + i) as u64))
            .collect::<Result<_>>()?;
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir)?;
        let manifest = DatasetManifest {
            task,
            m,
            topology,
            split: name.to_string(),
            count,
            counts: spec.counts,
            generator: spec.generator,
            raster_p: if task == Task::Manip { Some(spec.raster_p) } else { None },
            dtype: "f32".to_string(),
            version: FORMAT_VERSION,
        };
        write_split(&dir, &manifest, &records)?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

fn write_split(
    dir: &Path,
    manifest: &DatasetManifest,
    records: &[GeneratedInstance],
) -> Result<()> {
    let mut maps = fs::File::create(dir.join("maps.bin"))?;
    let mut goals = fs::File::create(dir.join("goals.bin"))?;
    let mut distances = fs::File::create(dir.join("distances.bin"))?;
    let mut rasters = if manifest.raster_p.is_some() {
        Some(fs::File::create(dir.join("rasters.bin"))?)
    } else {
        None
    };
    for rec in records {
        maps.write_all(rec.instance.map.cells())?;
        goals.write_all(&(rec.instance.goal.row as u16).to_le_bytes())?;
        goals.write_all(&(rec.instance.goal.col as u16).to_le_bytes())?;
        for v in rec.instance.gt.values() {
            distances.write_all(&v.to_le_bytes())?;
        }
        if let (Some(f), Some(r)) = (rasters.as_mut(), rec.raster.as_ref()) {
            f.write_all(r)?;
        }
    }
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// One loaded split: verified instances plus rasters when present.
pub struct Split {
    pub manifest: DatasetManifest,
    pub instances: Vec<PlanningInstance>,
    pub rasters: Option<Vec<Vec<u8>>>,
}

/// Reads a split directory, validating shapes and Bellman consistency of
/// every stored field.
pub fn load_split(dir: &Path) -> Result<Split> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    manifest.validate()?;
    let m = manifest.m;
    let count = manifest.count;
    let maps = fs::read(dir.join("maps.bin"))?;
    let goals = fs::read(dir.join("goals.bin"))?;
    let distances = fs::read(dir.join("distances.bin"))?;
    if maps.len() != count * m * m {
        return Err(Error::InvalidConfig(format!(
            "maps.bin holds {} bytes, expected {}",
            maps.len(),
            count * m * m
        )));
    }
    if goals.len() != count * 4 {
        return Err(Error::InvalidConfig(format!(
            "goals.bin holds {} bytes, expected {}",
            goals.len(),
            count * 4
        )));
    }
    if distances.len() != count * m * m * 4 {
        return Err(Error::InvalidConfig(format!(
            "distances.bin holds {} bytes, expected {}",
            distances.len(),
            count * m * m * 4
        )));
    }
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let cells = maps[i * m * m..(i + 1) * m * m].to_vec();
        let map = GridMap::new(m, cells, manifest.topology)?;
        let row = u16::from_le_bytes(goals[i * 4..i * 4 + 2].try_into().unwrap()) as usize;
        let col = u16::from_le_bytes(goals[i * 4 + 2..i * 4 + 4].try_into().unwrap()) as usize;
        let goal = GoalSpec::new(row, col);
        let values: Vec<f32> = distances[i * m * m * 4..(i + 1) * m * m * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let gt = DistanceField::new(m, values)?;
        instances.push(PlanningInstance::new(map, goal, gt)?);
    }
    let rasters = match manifest.raster_p {
        Some(p) => {
            let raw = fs::read(dir.join("rasters.bin"))?;
            if raw.len() != count * p * p {
                return Err(Error::InvalidConfig(format!(
                    "rasters.bin holds {} bytes, expected {}",
                    raw.len(),
                    count * p * p
                )));
            }
            Some(raw.chunks_exact(p * p).map(|c| c.to_vec()).collect())
        }
        None => None,
    };
    Ok(Split { manifest, instances, rasters })
}

/// The three split directories of a dataset root.
pub fn split_dirs(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (root.join("train"), root.join("val"), root.join("test"))
}
