//! The three-scale flow-estimation network.

mod block;
pub mod checkpoint;
mod config;
mod layers;
mod model;
mod module;
mod weights;

pub use block::BlockOutput;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use config::{
    Activation, BlockWidths, NetConfig, BASE_INPUT_CHANNELS, BLOCK_SCALES, MODULE_OUTPUT_CHANNELS,
    PAD_MULTIPLE, REFINE_INPUT_CHANNELS,
};
pub use model::{
    base_block_forward, interpolate, predict, refinement_block_forward, Prediction, RefineStage,
    TrainingPass,
};
pub use weights::{count_parameters, count_unique, BlockId, Gradients, InitScheme, ModelWeights, Param, WEIGHTS_VERSION};
