//! Multi-task Deep U-Net: 2D segmentation plus a pre/post-ablation
//! classifier on spatial-pyramid-pooled encoder features.

mod checkpoint;
mod model;
pub mod ops;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use model::{stack_batch, Cache, ForwardOutput, Gradients, Mode, UNet, BN_MOMENTUM};
pub use params::{
    count_parameters, init_parameters, LayerIds, Layout, NetworkConfig, PairIds, ParamKind,
    ParamSpec, ParamTensor, ParameterSet, UnitIds, DEPTH,
};
pub use tensor::{Feat, Scalar};
