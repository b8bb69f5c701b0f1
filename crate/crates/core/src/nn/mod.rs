//! Minimal deterministic CNN engine: per-sample forward/backward for a fixed
//! set of layer kinds, cross-entropy loss, SGD with momentum, plateau
//! scheduling, partial freezing and checkpoints.

pub mod checkpoint;
pub mod history;
pub mod layer;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
pub use history::{EpochRecord, TrainConfig, TrainHistory};
pub use layer::{Cache, Layer, LayerGrads, LayerKind, LayerSpec};
pub use loss::{one_hot, softmax_cross_entropy};
pub use network::{freeze_fraction, param_partition, Network, ParamGrads, ParamPartition};
pub use optim::{plateau_schedule, sgd_momentum_step, Monitor, PlateauScheduler};
pub use tensor::Tensor;
