//! The fixed convolutional network: layout, kernels, training and
//! checkpointing.

pub mod arch;
pub mod checkpoint;
pub mod network;
pub mod ops;
pub mod train;

pub use arch::{Arch, LayerSpec, LayerTag};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{argmax_rows, build_network, nll_loss, Capture, Gradients, LayerParams, ModelState, Network, StepScratch, TrainMeta};
pub use train::{evaluate, train, EpochRecord, EvalReport, TrainConfig};
