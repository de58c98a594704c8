//! Model-merging laboratory on small fully-connected experts.
//!
//! The crate trains a shared pre-trained MLP and per-task fine-tuned experts on
//! synthetic Gaussian-cluster tasks, merges them statically (weight averaging,
//! task arithmetic, TIES) or per sample ([`se`]), and measures how merged
//! representations relate to each expert's ([`diagnostics`]).

pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod math;
pub mod merge;
pub mod model;
pub mod se;
pub mod suite;
pub mod train;

pub use error::{Error, Result};
pub use math::{ActivationVector, ParamIndex, ParamVector, TensorEntry};
pub use merge::{MergeConfig, MergeMethod, TaskVector};
pub use model::{Activation, ModelSpec};
pub use se::{SeConfig, SeMerger, SimilarityReport};
pub use suite::{SuiteParams, TaskSuite};
pub use train::{Optimizer, TrainConfig};
