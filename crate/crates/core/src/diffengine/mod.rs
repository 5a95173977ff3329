//! Minimal reverse-mode differentiable array engine with Adam, just large
//! enough for the encoder-decoder model and its losses. 64-bit floats
//! throughout; every gradient is checkable against finite differences.

mod adam;
mod ops;
mod params;
mod tensor;

pub use adam::AdamState;
pub use ops::{add_all, mean_all, DIV_EPSILON};
pub use params::{
    load_checkpoint, save_checkpoint, CheckpointManifest, LoadedCheckpoint, ParamSet,
    TensorRecord,
};
pub use tensor::{backward, Tensor};
