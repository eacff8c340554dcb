//! C ABI for the planning toolkit: classical distance fields and A*, the
//! synthetic map generator, and inference with trained planner checkpoints
//! through an opaque handle. All functions return a status code; outputs go
//! through caller-allocated buffers.

use std::ffi::CStr;
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gridplan::eval::PlannerModel;
use gridplan::grid::{GoalSpec, GridMap, Topology};
use gridplan::mapgen::NavGenSpec;
use gridplan::spt::SptModel;
use gridplan::vin::VinModel;

/// Result codes for every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpStatus {
    Ok = 0,
    /// A pointer argument was null.
    NullPointer = 1,
    /// Arguments violate a contract (bounds, occupancy, sizes).
    InvalidArgument = 2,
    /// Checkpoint file could not be read or parsed.
    Io = 3,
    /// Internal failure (panic caught at the boundary).
    Internal = 4,
}

/// Opaque handle to a loaded planner model.
pub struct GpPlanner {
    model: PlannerModel<f32>,
    m: usize,
}

fn build_map(cells: *const u8, m: usize, toroidal: bool) -> Result<GridMap, GpStatus> {
    if cells.is_null() {
        return Err(GpStatus::NullPointer);
    }
    let slice = unsafe { std::slice::from_raw_parts(cells, m * m) };
    let topology = if toroidal { Topology::Toroidal } else { Topology::Planar };
    GridMap::new(m, slice.to_vec(), topology).map_err(|_| GpStatus::InvalidArgument)
}

fn guard<F: FnOnce() -> GpStatus>(f: F) -> GpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => GpStatus::Internal,
    }
}

/// Shortest-path distances to the goal from every cell, -1 for obstacles
/// and unreachable cells. `cells` is m*m row-major with 0 free, 1 obstacle;
/// `out_distances` must hold m*m floats.
///
/// # Safety
/// `cells` must point to m*m readable bytes and `out_distances` to m*m
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn gp_dijkstra_field(
    cells: *const u8,
    m: usize,
    toroidal: bool,
    goal_row: u16,
    goal_col: u16,
    out_distances: *mut f32,
) -> GpStatus {
    guard(|| {
        if out_distances.is_null() {
            return GpStatus::NullPointer;
        }
        let map = match build_map(cells, m, toroidal) {
            Ok(map) => map,
            Err(status) => return status,
        };
        let goal = GoalSpec::new(goal_row as usize, goal_col as usize);
        match gridplan::oracle::dijkstra_field(&map, goal) {
            Ok(field) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_distances, m * m) };
                out.copy_from_slice(field.values());
                GpStatus::Ok
            }
            Err(_) => GpStatus::InvalidArgument,
        }
    })
}

/// Shortest path length from start to goal, or -1 when unreachable.
///
/// # Safety
/// `cells` must point to m*m readable bytes; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gp_astar(
    cells: *const u8,
    m: usize,
    toroidal: bool,
    start_row: u16,
    start_col: u16,
    goal_row: u16,
    goal_col: u16,
    out_len: *mut i32,
) -> GpStatus {
    guard(|| {
        if out_len.is_null() {
            return GpStatus::NullPointer;
        }
        let map = match build_map(cells, m, toroidal) {
            Ok(map) => map,
            Err(status) => return status,
        };
        let goal = GoalSpec::new(goal_row as usize, goal_col as usize);
        match gridplan::oracle::astar(&map, (start_row as usize, start_col as usize), goal) {
            Ok(Some(len)) => {
                unsafe { *out_len = len as i32 };
                GpStatus::Ok
            }
            Ok(None) => {
                unsafe { *out_len = -1 };
                GpStatus::Ok
            }
            Err(_) => GpStatus::InvalidArgument,
        }
    })
}

/// Deterministic synthetic navigation maze for (seed, index); writes m*m
/// bytes (0 free, 1 obstacle).
///
/// # Safety
/// `out_cells` must point to m*m writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gp_gen_nav_map(
    m: usize,
    o_min: usize,
    o_max: usize,
    seed: u64,
    index: u64,
    out_cells: *mut u8,
) -> GpStatus {
    guard(|| {
        if out_cells.is_null() {
            return GpStatus::NullPointer;
        }
        let mut spec = NavGenSpec::new(m, seed);
        spec.o_min = o_min;
        spec.o_max = o_max;
        match gridplan::mapgen::gen_nav_map(&spec, index) {
            Ok(map) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_cells, m * m) };
                out.copy_from_slice(map.cells());
                GpStatus::Ok
            }
            Err(_) => GpStatus::InvalidArgument,
        }
    })
}

/// Loads a planner checkpoint (transformer or value-iteration baseline) for
/// maps of side `m`. The handle must be released with [`gp_planner_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gp_planner_load(
    path: *const c_char,
    m: usize,
    out: *mut *mut GpPlanner,
) -> GpStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return GpStatus::NullPointer;
        }
        unsafe { *out = ptr::null_mut() };
        let Ok(path) = (unsafe { CStr::from_ptr(path) }).to_str() else {
            return GpStatus::InvalidArgument;
        };
        let params = match gridplan::autodiff::load_checkpoint::<f32>(Path::new(path)) {
            Ok(p) => p,
            Err(_) => return GpStatus::Io,
        };
        let is_vin = params.iter().any(|(n, _)| n.starts_with("vin."));
        let model = if is_vin {
            let config = match VinModel::<f32>::config_from_params(&params, m) {
                Ok(c) => c,
                Err(_) => return GpStatus::Io,
            };
            match VinModel::from_params(config, params) {
                Ok(model) => PlannerModel::Vin(model),
                Err(_) => return GpStatus::Io,
            }
        } else {
            let config = match SptModel::<f32>::config_from_params(&params, m) {
                Ok(c) => c,
                Err(_) => return GpStatus::Io,
            };
            match SptModel::from_params(config, params) {
                Ok(model) => PlannerModel::Spt(model),
                Err(_) => return GpStatus::Io,
            }
        };
        unsafe { *out = Box::into_raw(Box::new(GpPlanner { model, m })) };
        GpStatus::Ok
    })
}

/// Releases a planner handle. Null is a no-op.
///
/// # Safety
/// `planner` must be a pointer from [`gp_planner_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gp_planner_free(planner: *mut GpPlanner) {
    if !planner.is_null() {
        drop(unsafe { Box::from_raw(planner) });
    }
}

/// Predicted action distances from a loaded planner; writes m*m floats.
///
/// # Safety
/// `planner` must be a live handle; `cells` must point to m*m readable
/// bytes and `out_distances` to m*m writable floats.
#[no_mangle]
pub unsafe extern "C" fn gp_planner_predict(
    planner: *const GpPlanner,
    cells: *const u8,
    toroidal: bool,
    goal_row: u16,
    goal_col: u16,
    out_distances: *mut f32,
) -> GpStatus {
    guard(|| {
        if planner.is_null() || out_distances.is_null() {
            return GpStatus::NullPointer;
        }
        let planner = unsafe { &*planner };
        let map = match build_map(cells, planner.m, toroidal) {
            Ok(map) => map,
            Err(status) => return status,
        };
        let goal = GoalSpec::new(goal_row as usize, goal_col as usize);
        if !map.in_bounds(goal.cell()) {
            return GpStatus::InvalidArgument;
        }
        match planner.model.predict(&map, goal) {
            Ok(field) => {
                let out = unsafe {
                    std::slice::from_raw_parts_mut(out_distances, planner.m * planner.m)
                };
                out.copy_from_slice(field.values());
                GpStatus::Ok
            }
            Err(_) => GpStatus::InvalidArgument,
        }
    })
}

/// Human-readable name of a status code.
#[no_mangle]
pub extern "C" fn gp_status_name(status: GpStatus) -> *const c_char {
    let name: &'static [u8] = match status {
        GpStatus::Ok => b"ok\0",
        GpStatus::NullPointer => b"null pointer\0",
        GpStatus::InvalidArgument => b"invalid argument\0",
        GpStatus::Io => b"io error\0",
        GpStatus::Internal => b"internal error\0",
    };
    name.as_ptr() as *const c_char
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dijkstra_via_ffi_matches_manhattan() {
        let cells = vec![0u8; 9];
        let mut out = vec![0.0f32; 9];
        let status =
            unsafe { gp_dijkstra_field(cells.as_ptr(), 3, false, 1, 1, out.as_mut_ptr()) };
        assert_eq!(status, GpStatus::Ok);
        assert_eq!(out, vec![2.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn error_codes_for_bad_input() {
        let mut out = vec![0.0f32; 9];
        let status =
            unsafe { gp_dijkstra_field(std::ptr::null(), 3, false, 1, 1, out.as_mut_ptr()) };
        assert_eq!(status, GpStatus::NullPointer);

        // Goal on an obstacle.
        let cells = vec![0, 0, 0, 0, 1, 0, 0, 0, 0u8];
        let status =
            unsafe { gp_dijkstra_field(cells.as_ptr(), 3, false, 1, 1, out.as_mut_ptr()) };
        assert_eq!(status, GpStatus::InvalidArgument);
    }

    #[test]
    fn astar_reports_unreachable_as_negative() {
        let cells = vec![0, 0, 0, 1, 1, 1, 0, 0, 0u8];
        let mut len = 0i32;
        let status =
            unsafe { gp_astar(cells.as_ptr(), 3, false, 2, 0, 0, 0, &mut len as *mut i32) };
        assert_eq!(status, GpStatus::Ok);
        assert_eq!(len, -1);
    }

    #[test]
    fn generated_maps_are_deterministic() {
        let mut a = vec![0u8; 225];
        let mut b = vec![0u8; 225];
        unsafe {
            assert_eq!(gp_gen_nav_map(15, 0, 5, 9, 4, a.as_mut_ptr()), GpStatus::Ok);
            assert_eq!(gp_gen_nav_map(15, 0, 5, 9, 4, b.as_mut_ptr()), GpStatus::Ok);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn planner_roundtrip_through_checkpoint() {
        use gridplan::autodiff::save_checkpoint;
        use gridplan::spt::SPTConfig;

        let dir = std::env::temp_dir().join(format!("gp_ffi_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.ckpt");
        let model = SptModel::<f32>::new(SPTConfig::tiny(5), 3).unwrap();
        save_checkpoint(&path, &[&model.params]).unwrap();

        let c_path = std::ffi::CString::new(path.to_str().unwrap()).unwrap();
        let mut handle: *mut GpPlanner = std::ptr::null_mut();
        let status = unsafe { gp_planner_load(c_path.as_ptr(), 5, &mut handle) };
        assert_eq!(status, GpStatus::Ok);
        assert!(!handle.is_null());

        let cells = vec![0u8; 25];
        let mut out = vec![0.0f32; 25];
        let status =
            unsafe { gp_planner_predict(handle, cells.as_ptr(), false, 2, 2, out.as_mut_ptr()) };
        assert_eq!(status, GpStatus::Ok);

        // Same prediction as the in-process model.
        let map = GridMap::empty(5, Topology::Planar);
        let direct = model.predict(&map, GoalSpec::new(2, 2)).unwrap();
        assert_eq!(out, direct.values());

        unsafe { gp_planner_free(handle) };
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn status_names_are_terminated() {
        let name = gp_status_name(GpStatus::InvalidArgument);
        let s = unsafe { CStr::from_ptr(name) }.to_str().unwrap();
        assert_eq!(s, "invalid argument");
    }
}
