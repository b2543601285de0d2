//! Layers with explicit forward/backward passes, the model stack, the Adam
//! optimizer and checkpoint persistence.

pub mod adam;
pub mod batchnorm;
pub mod checkpoint;
pub mod dense;
pub mod model;

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BnMode, BnState, StatGrad};
pub use dense::{softmax_rows, DenseLayer, SoftmaxLayer, TanhLayer};
pub use model::{ClassifierBn, ForwardOutput, Layer, Model, Phase, Topology};
