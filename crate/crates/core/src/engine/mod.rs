//! Dense-array numerical engine: layers, reverse-mode gradients, loss,
//! optimizer and the finite-difference oracle.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Tape};
pub use layers::{layer_backward, layer_forward, Cache, ForwardCtx, LayerKind, LayerNode, Phase};
pub use loss::{cross_entropy_loss, softmax};
pub use optim::{sgd_step, SgdConfig, SgdState};
