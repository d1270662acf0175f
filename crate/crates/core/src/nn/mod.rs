//! Layers, residual blocks and the three networks: the UNet-like
//! pre-processor, the FC-ResNet and their composition.

mod block;
mod layers;
mod model;
mod spec;
mod summary;

pub use block::{residual_block, BlockVariant, ResidualBlock, ResidualBlockCfg};
pub use layers::{BnUnit, Builder, ConvUnit};
pub use model::{
    Arch, ArchConfig, LongSkips, ModelGraph, Row, SkipConnection, SkipMode, Stage, Trace,
    SPATIAL_MULTIPLE,
};
pub use spec::{
    fc_resnet_long_skips, fc_resnet_table, fcn_table, scale_width, LayerKind, LayerSpec, Resample,
};
pub use summary::{summarize, ModelSummary, SummaryRow};
