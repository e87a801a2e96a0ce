//! Dense float64 tensors, a define-by-run differentiation graph, Adagrad and
//! the binary checkpoint format.

pub mod checkpoint;
pub mod fd;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use graph::{Gradients, Graph, Var};
pub use optim::AdagradState;
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::{NumericsError, Result, Shape, Tensor};

/// Uniform initialization range for every trainable weight.
pub const INIT_SCALE: f64 = 0.08;

/// Global gradient-norm clip applied before each optimizer step.
pub const CLIP_NORM: f64 = 5.0;
