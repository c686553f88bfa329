pub mod alignment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod nn;
pub mod optim;
pub mod noise;
pub mod ops;
pub mod params;
pub mod pretrain;
pub mod tensor;
pub mod video;

pub use error::{Result, TapError};
pub use tensor::{Real, Tensor};
