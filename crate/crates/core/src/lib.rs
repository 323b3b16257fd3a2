//! Semi-supervised classification with meta-learned pseudo-labels.
//!
//! Pseudo-labels for unlabeled examples start at the classifier's own
//! predictions and are refined by the gradient of the labeled loss taken
//! through a virtual SGD step. The crate contains a small reverse-mode
//! autodiff engine, an MLP classifier, the exact and first-order
//! meta-gradients, mixup, the training loops and a harness that checks the
//! descent and rate guarantees numerically.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod meta;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Activation, Checkpoint, MlpClassifier, ParamVector};
pub use tensor::Tensor;
pub use trainer::{fit, TrainConfig};
