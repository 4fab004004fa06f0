//! Parameter storage, optimization and checkpoint archives shared by the
//! denoiser and the segmentation network.

pub mod archive;
pub mod optim;
pub mod params;

pub use archive::Archive;
pub use optim::{Adam, AdamState, Plateau, PlateauMode};
pub use params::{tensor_maps_bit_eq, ParamStore, TensorData, TensorMap};
