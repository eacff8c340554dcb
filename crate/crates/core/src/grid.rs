//! Grid-world domain types shared by every other module: occupancy maps,
//! goals, the four-action move set, and action-distance fields.
//!
//! Conventions: row 0 is north and row indices grow southward; `(row, col)`
//! cells index row-major arrays. Planar grids treat off-grid moves as
//! nonexistent; toroidal grids wrap indices modulo the map size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether grid edges are walls or wrap around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Planar,
    Toroidal,
}

/// A grid cell as `(row, col)`.
pub type Cell = (usize, usize);

/// The four moves, in canonical order (used for deterministic tie-breaking).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    North,
    South,
    East,
    West,
}

impl Action {
    /// All actions in canonical order.
    pub const ALL: [Action; 4] = [Action::North, Action::South, Action::East, Action::West];

    /// Row/col delta of this move (row 0 is north).
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::North => (-1, 0),
            Action::South => (1, 0),
            Action::East => (0, 1),
            Action::West => (0, -1),
        }
    }

    /// Index of this action within [`Action::ALL`].
    pub fn index(self) -> usize {
        match self {
            Action::North => 0,
            Action::South => 1,
            Action::East => 2,
            Action::West => 3,
        }
    }
}

/// M×M binary occupancy map. Cell value 1 is an obstacle, 0 is free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    size: usize,
    cells: Vec<u8>,
    topology: Topology,
}

impl GridMap {
    /// Builds a map from row-major cells, validating the invariants:
    /// every value is 0 or 1 and at least one cell is free.
    pub fn new(size: usize, cells: Vec<u8>, topology: Topology) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidGrid(format!("size {size} < 2")));
        }
        if cells.len() != size * size {
            return Err(Error::InvalidGrid(format!(
                "expected {} cells, got {}",
                size * size,
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::InvalidGrid("cell values must be 0 or 1".into()));
        }
        if cells.iter().all(|&c| c == 1) {
            return Err(Error::InvalidGrid("map has no free cell".into()));
        }
        Ok(Self { size, cells, topology })
    }

    /// An all-free map.
    pub fn empty(size: usize, topology: Topology) -> Self {
        Self { size, cells: vec![0; size * size], topology }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    /// Row-major cell values (0 free, 1 obstacle).
    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.0 < self.size && cell.1 < self.size
    }

    pub fn is_obstacle(&self, cell: Cell) -> bool {
        self.cells[cell.0 * self.size + cell.1] == 1
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        !self.is_obstacle(cell)
    }

    /// Cells reachable by one move from `cell`, one entry per action in
    /// canonical order. Planar topology yields `None` for off-grid moves;
    /// toroidal wraps modulo the size. Obstacle neighbors are still
    /// reported; callers decide what blocked means.
    pub fn neighbors(&self, cell: Cell) -> Result<[(Action, Option<Cell>); 4]> {
        if !self.in_bounds(cell) {
            return Err(Error::OutOfBounds { row: cell.0, col: cell.1, size: self.size });
        }
        let m = self.size as isize;
        let mut out = [(Action::North, None); 4];
        for (slot, &action) in out.iter_mut().zip(Action::ALL.iter()) {
            let (dr, dc) = action.delta();
            let r = cell.0 as isize + dr;
            let c = cell.1 as isize + dc;
            let target = match self.topology {
                Topology::Planar => {
                    if r < 0 || r >= m || c < 0 || c >= m {
                        None
                    } else {
                        Some((r as usize, c as usize))
                    }
                }
                Topology::Toroidal => {
                    Some((r.rem_euclid(m) as usize, c.rem_euclid(m) as usize))
                }
            };
            *slot = (action, target);
        }
        Ok(out)
    }

    /// All free cells, row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for r in 0..self.size {
            for c in 0..self.size {
                if self.is_free((r, c)) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Goal location on a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub row: usize,
    pub col: usize,
}

impl GoalSpec {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn cell(&self) -> Cell {
        (self.row, self.col)
    }
}

/// One-hot goal plane: M×M row-major, a single 1 at the goal cell.
pub fn goal_onehot(goal: GoalSpec, size: usize) -> Result<Vec<f32>> {
    if goal.row >= size || goal.col >= size {
        return Err(Error::OutOfBounds { row: goal.row, col: goal.col, size });
    }
    let mut plane = vec![0.0; size * size];
    plane[goal.row * size + goal.col] = 1.0;
    Ok(plane)
}

/// Sentinel marking obstacles and unreachable cells in a distance field.
pub const UNREACHABLE: f32 = -1.0;

/// M×M real-valued action distances. Values are ≥ 0 or exactly −1.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    size: usize,
    values: Vec<f32>,
}

impl DistanceField {
    pub fn new(size: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::InvalidGrid(format!(
                "expected {} values, got {}",
                size * size,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || (*v < 0.0 && *v != UNREACHABLE)) {
            return Err(Error::InvalidGrid(
                "distance values must be ≥ 0 or exactly -1".into(),
            ));
        }
        Ok(Self { size, values })
    }

    /// Wraps raw values without the ≥0-or-−1 check; used for model
    /// predictions, which may take any real value.
    pub fn from_prediction(size: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::InvalidGrid(format!(
                "expected {} values, got {}",
                size * size,
                values.len()
            )));
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, cell: Cell) -> f32 {
        self.values[cell.0 * self.size + cell.1]
    }

    pub fn is_unreachable(&self, cell: Cell) -> bool {
        self.get(cell) == UNREACHABLE
    }

    /// Local Bellman consistency of a ground-truth field:
    /// the goal reads 0, obstacles read −1, every free cell with a positive
    /// distance has a free neighbor exactly one step closer, and a −1 free
    /// cell never borders a reachable free cell.
    pub fn is_consistent_with(&self, map: &GridMap, goal: GoalSpec) -> bool {
        if self.size != map.size() || !map.in_bounds(goal.cell()) {
            return false;
        }
        if self.get(goal.cell()) != 0.0 || map.is_obstacle(goal.cell()) {
            return false;
        }
        for r in 0..self.size {
            for c in 0..self.size {
                let v = self.get((r, c));
                if map.is_obstacle((r, c)) {
                    if v != UNREACHABLE {
                        return false;
                    }
                    continue;
                }
                let neighbors = match map.neighbors((r, c)) {
                    Ok(n) => n,
                    Err(_) => return false,
                };
                if v == UNREACHABLE {
                    // An unreachable free cell cannot border a reachable one.
                    let borders_reachable = neighbors.iter().any(|(_, n)| {
                        n.map_or(false, |n| map.is_free(n) && self.get(n) >= 0.0)
                    });
                    if borders_reachable {
                        return false;
                    }
                } else if v > 0.0 {
                    let has_descent = neighbors.iter().any(|(_, n)| {
                        n.map_or(false, |n| map.is_free(n) && self.get(n) == v - 1.0)
                    });
                    if !has_descent {
                        return false;
                    }
                } else if v == 0.0 && (r, c) != goal.cell() {
                    return false;
                }
            }
        }
        true
    }
}

/// A map, a goal on it, and the ground-truth distance field.
#[derive(Debug, Clone)]
pub struct PlanningInstance {
    pub map: GridMap,
    pub goal: GoalSpec,
    pub gt: DistanceField,
}

impl PlanningInstance {
    /// Validates that the goal is free and the field is Bellman-consistent.
    pub fn new(map: GridMap, goal: GoalSpec, gt: DistanceField) -> Result<Self> {
        if !map.in_bounds(goal.cell()) {
            return Err(Error::OutOfBounds { row: goal.row, col: goal.col, size: map.size() });
        }
        if map.is_obstacle(goal.cell()) {
            return Err(Error::GoalOnObstacle { row: goal.row, col: goal.col });
        }
        if !gt.is_consistent_with(&map, goal) {
            return Err(Error::InvalidGrid("distance field is not Bellman-consistent".into()));
        }
        Ok(Self { map, goal, gt })
    }

    pub fn size(&self) -> usize {
        self.map.size()
    }
}
