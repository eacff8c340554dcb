//! Classical planners: binary-heap Dijkstra for whole-map distance fields,
//! A* for single-query path lengths, and optimal-action extraction used by
//! the action-accuracy metric.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::grid::{Action, Cell, DistanceField, GoalSpec, GridMap, Topology, UNREACHABLE};

/// Per-cell subset of optimal actions, stored as bitmasks over
/// [`Action::ALL`] order.
#[derive(Debug, Clone)]
pub struct OptimalActionSet {
    size: usize,
    masks: Vec<u8>,
}

impl OptimalActionSet {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, cell: Cell, action: Action) -> bool {
        self.masks[cell.0 * self.size + cell.1] & (1 << action.index()) != 0
    }

    pub fn is_empty(&self, cell: Cell) -> bool {
        self.masks[cell.0 * self.size + cell.1] == 0
    }

    pub fn actions(&self, cell: Cell) -> Vec<Action> {
        Action::ALL
            .iter()
            .copied()
            .filter(|a| self.contains(cell, *a))
            .collect()
    }
}

/// Search statistics for the runtime comparisons.
#[derive(Debug, Clone, Copy, Default)]
pub struct SearchStats {
    /// Nodes popped from the priority queue with a settled distance.
    pub expanded: usize,
}

/// Unit-cost shortest-path distance to the goal from every cell, −1 for
/// obstacles and unreachable cells. Uses a binary heap keyed on distance.
pub fn dijkstra_field(map: &GridMap, goal: GoalSpec) -> Result<DistanceField> {
    Ok(dijkstra_field_with_stats(map, goal)?.0)
}

pub fn dijkstra_field_with_stats(
    map: &GridMap,
    goal: GoalSpec,
) -> Result<(DistanceField, SearchStats)> {
    if !map.in_bounds(goal.cell()) {
        return Err(Error::OutOfBounds { row: goal.row, col: goal.col, size: map.size() });
    }
    if map.is_obstacle(goal.cell()) {
        return Err(Error::GoalOnObstacle { row: goal.row, col: goal.col });
    }
    let m = map.size();
    let mut dist = vec![u32::MAX; m * m];
    let mut heap: BinaryHeap<Reverse<(u32, usize)>> = BinaryHeap::new();
    let goal_idx = goal.row * m + goal.col;
    dist[goal_idx] = 0;
    heap.push(Reverse((0, goal_idx)));
    let mut stats = SearchStats::default();

    while let Some(Reverse((d, idx))) = heap.pop() {
        if d > dist[idx] {
            continue; // stale entry
        }
        stats.expanded += 1;
        let cell = (idx / m, idx % m);
        for (_, n) in map.neighbors(cell)?.iter() {
            let Some(n) = *n else { continue };
            if map.is_obstacle(n) {
                continue;
            }
            let n_idx = n.0 * m + n.1;
            let nd = d + 1;
            if nd < dist[n_idx] {
                dist[n_idx] = nd;
                heap.push(Reverse((nd, n_idx)));
            }
        }
    }

    let values = dist
        .iter()
        .map(|&d| if d == u32::MAX { UNREACHABLE } else { d as f32 })
        .collect();
    Ok((DistanceField::new(m, values)?, stats))
}

/// Actions that step one unit closer to the goal, per cell. Empty at the
/// goal, on obstacles, and on unreachable cells.
pub fn optimal_actions(gt: &DistanceField, map: &GridMap) -> OptimalActionSet {
    let m = map.size();
    let mut masks = vec![0u8; m * m];
    for r in 0..m {
        for c in 0..m {
            let v = gt.get((r, c));
            if v <= 0.0 || map.is_obstacle((r, c)) {
                continue;
            }
            let neighbors = map.neighbors((r, c)).expect("cell in bounds");
            let mut mask = 0u8;
            for (action, n) in neighbors.iter() {
                if let Some(n) = n {
                    if map.is_free(*n) && gt.get(*n) == v - 1.0 {
                        mask |= 1 << action.index();
                    }
                }
            }
            masks[r * m + c] = mask;
        }
    }
    OptimalActionSet { size: m, masks }
}

/// Manhattan distance, wrapped per axis on toroidal maps. Admissible for
/// unit-cost four-connected moves.
fn heuristic(a: Cell, b: Cell, size: usize, topology: Topology) -> u32 {
    let axis = |x: usize, y: usize| -> u32 {
        let d = x.abs_diff(y);
        match topology {
            Topology::Planar => d as u32,
            Topology::Toroidal => d.min(size - d) as u32,
        }
    };
    axis(a.0, b.0) + axis(a.1, b.1)
}

/// Shortest path length from `start` to the goal, or `None` if unreachable.
pub fn astar(map: &GridMap, start: Cell, goal: GoalSpec) -> Result<Option<u32>> {
    Ok(astar_with_stats(map, start, goal)?.0)
}

pub fn astar_with_stats(
    map: &GridMap,
    start: Cell,
    goal: GoalSpec,
) -> Result<(Option<u32>, SearchStats)> {
    if !map.in_bounds(start) {
        return Err(Error::OutOfBounds { row: start.0, col: start.1, size: map.size() });
    }
    if !map.in_bounds(goal.cell()) {
        return Err(Error::OutOfBounds { row: goal.row, col: goal.col, size: map.size() });
    }
    if map.is_obstacle(start) {
        return Err(Error::StartOnObstacle { row: start.0, col: start.1 });
    }
    if map.is_obstacle(goal.cell()) {
        return Err(Error::GoalOnObstacle { row: goal.row, col: goal.col });
    }
    let m = map.size();
    let goal_cell = goal.cell();
    let topology = map.topology();
    let mut g_score = vec![u32::MAX; m * m];
    // Heap entries are (f, g, idx); stale entries skipped on pop.
    let mut heap: BinaryHeap<Reverse<(u32, u32, usize)>> = BinaryHeap::new();
    let start_idx = start.0 * m + start.1;
    g_score[start_idx] = 0;
    heap.push(Reverse((heuristic(start, goal_cell, m, topology), 0, start_idx)));
    let mut stats = SearchStats::default();

    while let Some(Reverse((_, g, idx))) = heap.pop() {
        if g > g_score[idx] {
            continue;
        }
        let cell = (idx / m, idx % m);
        if cell == goal_cell {
            return Ok((Some(g), stats));
        }
        stats.expanded += 1;
        for (_, n) in map.neighbors(cell)?.iter() {
            let Some(n) = *n else { continue };
            if map.is_obstacle(n) {
                continue;
            }
            let n_idx = n.0 * m + n.1;
            let ng = g + 1;
            if ng < g_score[n_idx] {
                g_score[n_idx] = ng;
                heap.push(Reverse((ng + heuristic(n, goal_cell, m, topology), ng, n_idx)));
            }
        }
    }
    Ok((None, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Topology;

    fn field(map: &GridMap, goal: (usize, usize)) -> DistanceField {
        dijkstra_field(map, GoalSpec::new(goal.0, goal.1)).unwrap()
    }

    #[test]
    fn empty_3x3_is_manhattan() {
        let map = GridMap::empty(3, Topology::Planar);
        let gt = field(&map, (1, 1));
        assert_eq!(gt.values(), &[2.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn wall_disconnects_bottom_row() {
        let cells = vec![0, 0, 0, 1, 1, 1, 0, 0, 0];
        let map = GridMap::new(3, cells, Topology::Planar).unwrap();
        let gt = field(&map, (0, 0));
        assert_eq!(&gt.values()[..3], &[0.0, 1.0, 2.0]);
        assert_eq!(&gt.values()[3..6], &[-1.0, -1.0, -1.0]);
        assert_eq!(&gt.values()[6..], &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn toroidal_wraps_distances() {
        let map = GridMap::empty(4, Topology::Toroidal);
        let gt = field(&map, (0, 0));
        // (3,3) is one wrap step in each axis from (0,0).
        assert_eq!(gt.get((3, 3)), 2.0);
    }

    #[test]
    fn goal_on_obstacle_is_contract_violation() {
        let map = GridMap::new(2, vec![1, 0, 0, 0], Topology::Planar).unwrap();
        assert!(dijkstra_field(&map, GoalSpec::new(0, 0)).is_err());
    }

    #[test]
    fn optimal_actions_single_and_tied() {
        let map = GridMap::empty(4, Topology::Planar);
        // Goal directly east of (2, 1).
        let gt = field(&map, (2, 2));
        let acts = optimal_actions(&gt, &map);
        assert_eq!(acts.actions((2, 1)), vec![Action::East]);
        // Goal one step north and one step east of (3, 1).
        assert_eq!(acts.actions((3, 1)), vec![Action::North, Action::East]);
        // Goal cell has no optimal action.
        assert!(acts.is_empty((2, 2)));
    }

    #[test]
    fn astar_matches_manhattan_on_empty_map() {
        let map = GridMap::empty(15, Topology::Planar);
        let len = astar(&map, (0, 0), GoalSpec::new(14, 14)).unwrap();
        assert_eq!(len, Some(28));
    }

    #[test]
    fn astar_reports_unreachable() {
        let cells = vec![0, 0, 0, 1, 1, 1, 0, 0, 0];
        let map = GridMap::new(3, cells, Topology::Planar).unwrap();
        let len = astar(&map, (2, 0), GoalSpec::new(0, 0)).unwrap();
        assert_eq!(len, None);
    }

    #[test]
    fn toroidal_shift_equivariance_of_fields() {
        // Cyclically shifting a toroidal map and its goal shifts the field.
        let m = 9usize;
        let mut cells = vec![0u8; m * m];
        for &(r, c) in &[(1usize, 2usize), (1, 3), (4, 4), (7, 0), (5, 6)] {
            cells[r * m + c] = 1;
        }
        let map = GridMap::new(m, cells.clone(), Topology::Toroidal).unwrap();
        let goal = GoalSpec::new(2, 5);
        let base = dijkstra_field(&map, goal).unwrap();
        let (dr, dc) = (4usize, 7usize);
        let mut shifted_cells = vec![0u8; m * m];
        for r in 0..m {
            for c in 0..m {
                shifted_cells[((r + dr) % m) * m + (c + dc) % m] = cells[r * m + c];
            }
        }
        let shifted_map = GridMap::new(m, shifted_cells, Topology::Toroidal).unwrap();
        let shifted_goal = GoalSpec::new((goal.row + dr) % m, (goal.col + dc) % m);
        let shifted = dijkstra_field(&shifted_map, shifted_goal).unwrap();
        for r in 0..m {
            for c in 0..m {
                assert_eq!(
                    base.get((r, c)),
                    shifted.get((((r + dr) % m), (c + dc) % m)),
                    "field not equivariant at ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn astar_expands_no_more_than_dijkstra() {
        let map = GridMap::empty(12, Topology::Planar);
        let goal = GoalSpec::new(2, 3);
        let (field, dj) = dijkstra_field_with_stats(&map, goal).unwrap();
        let (len, a) = astar_with_stats(&map, (11, 11), goal).unwrap();
        assert_eq!(len, Some(field.get((11, 11)) as u32));
        assert!(a.expanded <= dj.expanded);
    }
}
