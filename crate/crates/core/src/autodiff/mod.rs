//! Minimal dense-tensor reverse-mode differentiation engine: enough for the
//! planner, the baseline, and the mapper, and nothing more. Tensors that
//! participate in a graph are never mutated in place.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod sgd;
mod tensor;

pub use checkpoint::{checkpoint_names, load_checkpoint, save_checkpoint};
pub use gradcheck::grad_check;
pub use graph::{Graph, PadMode, Var, LAYER_NORM_EPS};
pub use params::{uniform_init, Binding, GradExport, ParamId, ParamSet};
pub use sgd::{decay_lr, sgd_step, sgd_step_momentum, SGDConfig};
pub use tensor::{Scalar, Tensor};
