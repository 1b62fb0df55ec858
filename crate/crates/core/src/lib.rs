//! Cross-domain AU label transfer through a latent feature domain built
//! from landmark-related and landmark-free features.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod opcheck;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Element type used for training, datasets and checkpoints.
pub type Real = f32;
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tensor::Tape<Real>;
