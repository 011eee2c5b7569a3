//! Minimal reverse-mode autodiff engine and the layer set used by the
//! segmentation models.

pub mod archive;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use archive::{ArchiveEntry, TensorArchive, TensorData};
pub use graph::{BatchStats, Graph, Padding, Var};
pub use layers::{BatchNorm2d, Conv2dLayer, ConvBlock, Mode, UpConvLayer};
pub use optim::{adam_step, OptimizerState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
