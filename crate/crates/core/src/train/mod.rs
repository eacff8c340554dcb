//! Dataset construction and serialization, supervision variants, and the
//! SGD training loop.

pub mod dataset;
mod supervision;
mod trainer;

pub use dataset::{
    build_dataset, generate_instance, load_split, split_dirs, DatasetManifest, DatasetSpec,
    GeneratedInstance, GeneratorSpec, Split, SplitCounts, Task, FORMAT_VERSION,
};
pub use supervision::{build_supervision, corrupt_noisy, sparsify, SupervisionMode, SupervisionSpec};
pub use trainer::{train, EpochMetrics, TrainConfig, TrainOutcome};

