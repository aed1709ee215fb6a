//! Dense numerical kernel: matrices, the split MLP, and its optimizer.

pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod optim;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use matrix::DenseMatrix;
pub use model::{Activation, Batch, DenseLayer, Freeze, Gradients, LayerGrad, Part, SplitModel};
pub use optim::{sgd_step, OptimizerState, Scope};
