pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod frame;
pub mod model;
pub mod params;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod verify;

pub use bbox::BoundingBox;
pub use error::{Error, Result};
pub use frame::{FrameTensor, Image};
pub use model::{Model, ModelConfig, Modality, Task};
pub use tensor::{Activation, Rng, Scalar, Tape, Tensor, TensorError, Var};
